//! Forecast error, disentanglement losses and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Reduce, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DGLossConfig {
    pub lambda_sep: f64,
    pub lambda_rare: f64,
    pub lambda_div: f64,
    /// Hinge margin of the separation loss.
    pub margin: f64,
    /// Temperature of the rarity contrastive term.
    pub tau_rare: f64,
    /// EMA decay of the common-prototype activation histogram.
    pub freq_ema: f64,
}

impl Default for DGLossConfig {
    fn default() -> Self {
        DGLossConfig {
            lambda_sep: 0.1,
            lambda_rare: 0.1,
            lambda_div: 0.1,
            margin: 0.1,
            tau_rare: 0.5,
            freq_ema: 0.9,
        }
    }
}

impl DGLossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_sep", self.lambda_sep),
            ("lambda_rare", self.lambda_rare),
            ("lambda_div", self.lambda_div),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.tau_rare > 0.0) {
            return Err(Error::Config(format!("tau_rare must be > 0, got {}", self.tau_rare)));
        }
        if !(self.freq_ema > 0.0 && self.freq_ema < 1.0) {
            return Err(Error::Config(format!("freq_ema must lie in (0, 1), got {}", self.freq_ema)));
        }
        Ok(())
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            shapes: vec![a.to_vec(), b.to_vec()],
        });
    }
    Ok(())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("mse", pred.shape(), target.shape())?;
    let n = pred.len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("mae", pred.shape(), target.shape())?;
    let n = pred.len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

/// Differentiable mean squared error.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_same("mse", tape.value(pred).shape(), tape.value(target).shape())?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    tape.mean(sq, Reduce::All)
}

/// EMA histogram of which common prototype wins (top-1) per window.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTracker {
    ema_counts: Vec<f64>,
    decay: f64,
}

impl FrequencyTracker {
    /// Starts uniform, so every prototype initially counts as common.
    pub fn new(m: usize, decay: f64) -> Self {
        FrequencyTracker {
            ema_counts: vec![1.0; m],
            decay,
        }
    }

    pub fn from_counts(counts: Vec<f64>, decay: f64) -> Self {
        FrequencyTracker {
            ema_counts: counts,
            decay,
        }
    }

    pub fn counts(&self) -> &[f64] {
        &self.ema_counts
    }

    /// `counts[index] / max(counts)`.
    pub fn frequency_weight(&self, top1: usize) -> f64 {
        let max = self.ema_counts.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            return 1.0;
        }
        self.ema_counts[top1] / max
    }

    /// Folds in one batch of top-1 indices as a normalized histogram.
    pub fn update(&mut self, top1: &[usize]) {
        if top1.is_empty() {
            return;
        }
        let mut hist = vec![0.0; self.ema_counts.len()];
        for &i in top1 {
            hist[i] += 1.0;
        }
        let n = top1.len() as f64;
        for (c, h) in self.ema_counts.iter_mut().zip(hist) {
            *c = self.decay * *c + (1.0 - self.decay) * (h / n);
        }
    }
}

/// Batch mean of `w max(0, m - Δρ) + (1 - w) max(0, m + Δρ)`.
///
/// `delta_rho` is `[B, 1]` (or `[B]`), `omega` holds one frequency weight per
/// row.
pub fn separation_loss(tape: &mut Tape, delta_rho: Var, omega: &[f64], margin: f64) -> Result<Var> {
    let b = tape.value(delta_rho).len();
    if omega.len() != b {
        return Err(Error::Shape {
            op: "separation_loss",
            shapes: vec![tape.value(delta_rho).shape().to_vec(), vec![omega.len()]],
        });
    }
    let d = if tape.value(delta_rho).shape().len() == 2 {
        delta_rho
    } else {
        let zeros = tape.constant(Tensor::zeros(&[b, 1]));
        let t = tape.transpose(delta_rho)?;
        tape.add(zeros, t)?
    };
    let w = tape.constant(Tensor::matrix(b, 1, omega.to_vec())?);
    let w_inv = tape.constant(Tensor::matrix(b, 1, omega.iter().map(|o| 1.0 - o).collect())?);
    let neg = tape.neg(d)?;
    let below = tape.add_scalar(neg, margin)?;
    let hinge_common = tape.relu(below)?;
    let above = tape.add_scalar(d, margin)?;
    let hinge_rare = tape.relu(above)?;
    let a = tape.mul(w, hinge_common)?;
    let c = tape.mul(w_inv, hinge_rare)?;
    let per = tape.add(a, c)?;
    tape.mean(per, Reduce::All)
}

/// Contrastive rarity loss over activated `(row, rare index)` pairs of a
/// `[B, N]` similarity matrix. Zero when nothing is activated.
pub fn rarity_loss(tape: &mut Tape, sims: Var, activated: &[(usize, usize)], tau: f64) -> Result<Var> {
    if activated.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let rows: Vec<usize> = activated.iter().map(|&(r, _)| r).collect();
    let picked: Vec<Vec<usize>> = activated.iter().map(|&(_, j)| vec![j]).collect();
    let s = tape.select_rows(sims, &rows)?;
    let logits = tape.div_scalar(s, tau)?;
    let pos = tape.gather_cols(logits, &picked)?;
    // log-sum-exp is safe without shifting: |s| <= 1 bounds logits by 1/tau.
    let e = tape.exp(logits)?;
    let z = tape.sum(e, Reduce::PerRow)?;
    let lse = tape.log(z)?;
    let nll = tape.sub(lse, pos)?;
    tape.mean(nll, Reduce::All)
}

/// Mean squared off-diagonal cosine similarity between rows of `p_c`.
/// Zero-norm rows have cosine 0 with everything.
pub fn diversity_loss(tape: &mut Tape, p_c: Var) -> Result<Var> {
    let (m, d) = tape.value(p_c).dims();
    if m < 2 {
        return Err(Error::Config(format!("diversity loss needs M >= 2, got {m}")));
    }
    let sq = tape.square(p_c)?;
    let ss = tape.sum(sq, Reduce::PerRow)?;
    let floored = tape.max_with_scalar(ss, 1e-24 * d as f64)?;
    let norm = tape.sqrt(floored)?;
    let unit = tape.div(p_c, norm)?;
    let ut = tape.transpose(unit)?;
    let gram = tape.matmul(unit, ut)?;
    let mut off = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                off.row_mut(i)[j] = 1.0;
            }
        }
    }
    let mask = tape.constant(off);
    let g2 = tape.square(gram)?;
    let masked = tape.mul(g2, mask)?;
    let total = tape.sum(masked, Reduce::All)?;
    tape.div_scalar(total, (m * (m - 1)) as f64)
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub mse: Var,
    pub sep: Option<Var>,
    pub rare: Option<Var>,
    pub div: Option<Var>,
}

/// `mse + λ_sep sep + λ_rare rare + λ_div div`. A term with zero weight (or
/// absent) is left off the tape entirely, so it contributes no gradient.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, cfg: &DGLossConfig) -> Result<Var> {
    let mut total = terms.mse;
    for (term, lambda) in [
        (terms.sep, cfg.lambda_sep),
        (terms.rare, cfg.lambda_rare),
        (terms.div, cfg.lambda_div),
    ] {
        if let Some(t) = term {
            if lambda != 0.0 {
                let weighted = tape.scale(t, lambda)?;
                total = tape.add(total, weighted)?;
            }
        }
    }
    Ok(total)
}
