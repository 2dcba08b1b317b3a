use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("Adam eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Bias-corrected Adam with moment buffers keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter from its stored gradient.
    /// Nothing is modified if any parameter lacks a gradient.
    pub fn step(&mut self, params: Vec<(&str, &mut Tensor)>) -> Result<()> {
        for (name, p) in &params {
            match p.grad() {
                None => return Err(Error::MissingGrad(name.to_string())),
                Some(g) if g.len() != p.len() => {
                    return Err(Error::Shape {
                        op: "adam",
                        shapes: vec![p.shape().to_vec(), vec![g.len()]],
                    })
                }
                _ => {}
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            let g = p.grad().expect("checked above").to_vec();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: Vec<f64>, g: Vec<f64>) -> Tensor {
        let mut t = Tensor::vector(v).with_requires_grad(true);
        t.set_grad(g).unwrap();
        t
    }

    #[test]
    fn first_step_closed_form() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = param(vec![0.5], vec![1.0]);
        adam.step(vec![("p", &mut p)]).unwrap();
        let want = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert_eq!(p.data()[0], want);
        // The step is lr in magnitude for any nonzero constant gradient.
        let mut q = param(vec![0.0], vec![-250.0]);
        Adam::new(AdamConfig::default()).step(vec![("q", &mut q)]).unwrap();
        assert!((q.data()[0] - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = param(vec![1.0, -2.0], vec![0.0, 0.0]);
        adam.step(vec![("p", &mut p)]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn missing_gradient_is_named() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut ok = param(vec![1.0], vec![1.0]);
        let mut bad = Tensor::vector(vec![1.0]).with_requires_grad(true);
        let err = adam.step(vec![("ok", &mut ok), ("head.w_o", &mut bad)]).unwrap_err();
        assert!(matches!(&err, Error::MissingGrad(n) if n == "head.w_o"));
        assert_eq!(ok.data(), &[1.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn deterministic_over_steps() {
        let run = || {
            let mut adam = Adam::new(AdamConfig::default());
            let mut p = param(vec![0.3, -0.7, 1.1], vec![0.0; 3]);
            for k in 0..10 {
                let g: Vec<f64> = p.data().iter().map(|w| 2.0 * w + 0.1 * k as f64).collect();
                p.set_grad(g).unwrap();
                adam.step(vec![("p", &mut p)]).unwrap();
            }
            p
        };
        assert!(run().bitwise_eq(&run()));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(AdamConfig {
            lr: 0.05,
            ..Default::default()
        });
        let mut p = param(vec![3.0, -4.0], vec![0.0; 2]);
        for _ in 0..2000 {
            let g: Vec<f64> = p.data().iter().map(|w| 2.0 * (w - 1.0)).collect();
            p.set_grad(g).unwrap();
            adam.step(vec![("p", &mut p)]).unwrap();
        }
        assert!(p.data().iter().all(|w| (w - 1.0).abs() < 1e-3));
    }
}
