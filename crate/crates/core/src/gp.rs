//! Prior samplers for prototype base sequences.
//!
//! Common sequences are draws from a zero-mean Gaussian process whose
//! covariance mixes a linear, an RBF and a periodic kernel. Rare sequences
//! are small isotropic Gaussian noise.
//!
//! Kernels are evaluated on time rescaled to `[0, 1]`, so lengthscales and
//! periods are fractions of the sequence length.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Jitter is multiplied by this factor on each failed factorization.
const JITTER_GROWTH: f64 = 10.0;
const MAX_JITTER_ESCALATIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Linear,
    Rbf,
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelMixtureConfig {
    pub lambda_l: f64,
    pub lambda_r: f64,
    pub lambda_p: f64,
    pub rbf_lengthscale: f64,
    pub periodic_period: f64,
    pub periodic_lengthscale: f64,
    pub linear_scale: f64,
    pub jitter: f64,
}

impl Default for KernelMixtureConfig {
    fn default() -> Self {
        KernelMixtureConfig {
            lambda_l: 1.0 / 3.0,
            lambda_r: 1.0 / 3.0,
            lambda_p: 1.0 / 3.0,
            rbf_lengthscale: 0.2,
            periodic_period: 0.25,
            periodic_lengthscale: 1.0,
            linear_scale: 1.0,
            jitter: 1e-6,
        }
    }
}

impl KernelMixtureConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_l, self.lambda_r, self.lambda_p];
        if lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("kernel mixing coefficients must be nonnegative".into()));
        }
        if lambdas.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("kernel mixing coefficients sum to zero".into()));
        }
        let positive = [
            ("rbf_lengthscale", self.rbf_lengthscale),
            ("periodic_period", self.periodic_period),
            ("periodic_lengthscale", self.periodic_lengthscale),
            ("linear_scale", self.linear_scale),
            ("jitter", self.jitter),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be strictly positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Mixture value `λ_l K_l + λ_r K_r + λ_p K_p` (no jitter).
    pub fn mixture(&self, t: f64, t2: f64) -> f64 {
        self.lambda_l * kernel_value(KernelKind::Linear, t, t2, self)
            + self.lambda_r * kernel_value(KernelKind::Rbf, t, t2, self)
            + self.lambda_p * kernel_value(KernelKind::Periodic, t, t2, self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RareInitConfig {
    pub sigma: f64,
    pub length: usize,
}

impl Default for RareInitConfig {
    fn default() -> Self {
        RareInitConfig {
            sigma: 0.02,
            length: 96,
        }
    }
}

impl RareInitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("rare init sigma must be > 0, got {}", self.sigma)));
        }
        if self.length == 0 {
            return Err(Error::Config("rare sequence length must be > 0".into()));
        }
        Ok(())
    }
}

pub fn kernel_value(kind: KernelKind, t: f64, t2: f64, cfg: &KernelMixtureConfig) -> f64 {
    match kind {
        KernelKind::Linear => cfg.linear_scale * t * t2,
        KernelKind::Rbf => {
            let d = t - t2;
            (-d * d / (2.0 * cfg.rbf_lengthscale * cfg.rbf_lengthscale)).exp()
        }
        KernelKind::Periodic => {
            let s = (std::f64::consts::PI * (t - t2).abs() / cfg.periodic_period).sin();
            (-2.0 * s * s / (cfg.periodic_lengthscale * cfg.periodic_lengthscale)).exp()
        }
    }
}

/// Time grid `i / (length - 1)`.
fn time_grid(length: usize) -> Vec<f64> {
    let denom = (length - 1) as f64;
    (0..length).map(|i| i as f64 / denom).collect()
}

fn gram_with_jitter(length: usize, cfg: &KernelMixtureConfig, jitter: f64) -> Vec<f64> {
    let ts = time_grid(length);
    let mut g = vec![0.0; length * length];
    for i in 0..length {
        for j in 0..=i {
            let v = cfg.mixture(ts[i], ts[j]);
            g[i * length + j] = v;
            g[j * length + i] = v;
        }
        g[i * length + i] += jitter;
    }
    g
}

fn cholesky(gram: &[f64], n: usize) -> Option<Vec<f64>> {
    let m = DMatrix::from_row_slice(n, n, gram);
    let l = m.cholesky()?.unpack();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            out[i * n + j] = l[(i, j)];
        }
    }
    Some(out)
}

/// Mixture Gram matrix on a `length`-point grid with jitter on the diagonal.
///
/// If the matrix is not numerically positive definite the jitter is raised
/// tenfold, at most three times, before giving up.
pub fn build_gram(length: usize, cfg: &KernelMixtureConfig) -> Result<Tensor> {
    Ok(factorize(length, cfg)?.gram)
}

/// A Gram matrix together with its lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct GpSampler {
    gram: Tensor,
    lower: Vec<f64>,
    n: usize,
}

fn factorize(length: usize, cfg: &KernelMixtureConfig) -> Result<GpSampler> {
    cfg.validate()?;
    if length < 2 {
        return Err(Error::Config(format!("gram length must be >= 2, got {length}")));
    }
    let mut jitter = cfg.jitter;
    for _ in 0..=MAX_JITTER_ESCALATIONS {
        let g = gram_with_jitter(length, cfg, jitter);
        if let Some(lower) = cholesky(&g, length) {
            return Ok(GpSampler {
                gram: Tensor::matrix(length, length, g)?,
                lower,
                n: length,
            });
        }
        log::debug!("gram not positive definite at jitter {jitter:e}; escalating");
        jitter *= JITTER_GROWTH;
    }
    Err(Error::Config(format!(
        "kernel gram of length {length} is not positive definite even with jitter {jitter:e}"
    )))
}

impl GpSampler {
    pub fn new(length: usize, cfg: &KernelMixtureConfig) -> Result<Self> {
        factorize(length, cfg)
    }

    /// Factorizes an explicit Gram matrix.
    pub fn from_gram(gram: &Tensor) -> Result<Self> {
        let (n, m) = gram.dims();
        if n != m || gram.shape().len() != 2 {
            return Err(Error::Shape {
                op: "sample_gp",
                shapes: vec![gram.shape().to_vec()],
            });
        }
        let lower = cholesky(gram.data(), n)
            .ok_or_else(|| Error::Config("gram matrix is not positive definite".into()))?;
        Ok(GpSampler {
            gram: gram.clone(),
            lower,
            n,
        })
    }

    pub fn gram(&self) -> &Tensor {
        &self.gram
    }

    /// One draw `L z` with `z ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.n).map(|_| rng.sample(StandardNormal)).collect();
        (0..self.n)
            .map(|i| {
                let row = &self.lower[i * self.n..i * self.n + i + 1];
                row.iter().zip(&z).map(|(l, zj)| l * zj).sum()
            })
            .collect()
    }
}

/// One GP draw for an explicit Gram matrix.
pub fn sample_gp<R: Rng + ?Sized>(gram: &Tensor, rng: &mut R) -> Result<Tensor> {
    Ok(Tensor::vector(GpSampler::from_gram(gram)?.sample(rng)))
}

/// `length` i.i.d. draws from `N(0, sigma^2)`.
pub fn sample_rare<R: Rng + ?Sized>(cfg: &RareInitConfig, rng: &mut R) -> Result<Tensor> {
    cfg.validate()?;
    let data = (0..cfg.length)
        .map(|_| cfg.sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Tensor::vector(data))
}
