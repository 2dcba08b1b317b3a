//! Central finite-difference check of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that near-zero gradients are
/// compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter block, in input order.
    pub max_rel_error: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences `(f(x+h) - f(x-h)) / 2h` for every entry of every parameter.
///
/// `f` receives a fresh tape and one leaf per parameter (all marked as
/// requiring gradients) and must return a single-element node.
#[allow(clippy::needless_range_loop)]
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::Config(format!("finite-difference step {step} outside (0, 1e-2]")));
    }
    let params: Vec<Tensor> = params.iter().map(|p| p.clone().with_requires_grad(true)).collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut max_rel_error = Vec::with_capacity(params.len());
    let mut work = params.clone();
    for (b, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[b].len());
        let mut worst: f64 = 0.0;
        for i in 0..params[b].len() {
            let orig = params[b].data()[i];
            work[b].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[b].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[b].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        max_rel_error.push(worst);
    }
    let passed = max_rel_error.iter().all(|&e| e < tol);
    Ok(GradCheckReport {
        max_rel_error,
        tol,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Reduce;

    #[test]
    fn sum_of_squares_passes() {
        let params = vec![
            Tensor::vector(vec![0.3, -1.2, 2.0]),
            Tensor::matrix(2, 2, vec![1.0, -0.5, 0.25, 1.5]).unwrap(),
        ];
        let report = finite_diff_check(
            |tape, vs| {
                let mut total = None;
                for &v in vs {
                    let sq = tape.square(v)?;
                    let s = tape.sum(sq, Reduce::All)?;
                    total = Some(match total {
                        None => s,
                        Some(t) => tape.add(t, s)?,
                    });
                }
                Ok(total.unwrap())
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.max_rel_error.len(), 2);
    }

    #[test]
    fn rejects_bad_step() {
        let p = [Tensor::scalar(1.0)];
        assert!(finite_diff_check(|_, vs| Ok(vs[0]), &p, 0.0, 1e-4).is_err());
        assert!(finite_diff_check(|_, vs| Ok(vs[0]), &p, 0.1, 1e-4).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A detached copy makes the tape report a zero gradient.
        let p = [Tensor::vector(vec![1.0, 2.0])];
        let report = finite_diff_check(
            |tape, vs| {
                let detached = tape.constant(tape.value(vs[0]).clone());
                tape.sum(detached, Reduce::All)
            },
            &p,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
    }
}
