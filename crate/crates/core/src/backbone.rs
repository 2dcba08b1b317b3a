//! Channel-independent linear backbone with per-window instance normalization.
//!
//! The encoder output `h` is the representation handed to the prototype
//! router; the base head turns `h` straight into a forecast for the
//! backbone-only variant.

use rand::Rng;

use crate::bank::xavier_uniform;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Lower bound applied to a window's standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceNormState {
    pub mu: f64,
    pub sigma: f64,
}

/// Z-scores one window with its own mean and (population) standard deviation.
pub fn instance_normalize(x: &[f64]) -> Result<(Vec<f64>, InstanceNormState)> {
    if x.len() < 2 {
        return Err(Error::Data(format!("instance normalization needs >= 2 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = var.sqrt().max(SIGMA_FLOOR);
    Ok((x.iter().map(|v| (v - mu) / sigma).collect(), InstanceNormState { mu, sigma }))
}

pub fn denormalize(y: &[f64], state: InstanceNormState) -> Vec<f64> {
    y.iter().map(|v| v * state.sigma + state.mu).collect()
}

/// Normalizes every row of a `[R, L]` matrix.
pub fn normalize_rows(x: &Tensor) -> Result<(Tensor, Vec<InstanceNormState>)> {
    let (r, l) = x.dims();
    let mut out = Vec::with_capacity(r * l);
    let mut states = Vec::with_capacity(r);
    for i in 0..r {
        let (row, st) = instance_normalize(x.row(i))?;
        out.extend(row);
        states.push(st);
    }
    Ok((Tensor::matrix(r, l, out)?, states))
}

/// Applies per-row `(mu, sigma)` to a `[R, H]` prediction on the tape.
pub fn denormalize_rows(tape: &mut Tape, y: Var, states: &[InstanceNormState]) -> Result<Var> {
    let r = states.len();
    let sigma = tape.constant(Tensor::matrix(r, 1, states.iter().map(|s| s.sigma).collect())?);
    let mu = tape.constant(Tensor::matrix(r, 1, states.iter().map(|s| s.mu).collect())?);
    let scaled = tape.mul(y, sigma)?;
    tape.add(scaled, mu)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearBackbone {
    /// `[L_p, D]`; applied to the seasonal part when decomposition is on.
    pub enc_weight: Tensor,
    pub enc_bias: Tensor,
    /// `[L_p, D]` trend encoder, present only with decomposition.
    pub trend_weight: Option<Tensor>,
    pub base_head_weight: Tensor,
    pub base_head_bias: Tensor,
    /// Odd moving-average window for a trend/seasonal split, if enabled.
    pub decomposition: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneVars {
    pub enc_weight: Var,
    pub enc_bias: Var,
    pub trend_weight: Option<Var>,
    pub base_head_weight: Var,
    pub base_head_bias: Var,
}

impl LinearBackbone {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        l_p: usize,
        d: usize,
        horizon: usize,
        decomposition: Option<usize>,
    ) -> Result<Self> {
        if l_p < 2 || d == 0 || horizon == 0 {
            return Err(Error::Config(format!(
                "backbone needs L_p >= 2, D >= 1, H >= 1 (got {l_p}, {d}, {horizon})"
            )));
        }
        if let Some(w) = decomposition {
            if w % 2 == 0 || w > l_p {
                return Err(Error::Config(format!(
                    "decomposition window must be odd and <= L_p, got {w}"
                )));
            }
        }
        let enc_weight = xavier_uniform(rng, l_p, d).with_requires_grad(true);
        let trend_weight = decomposition.map(|_| xavier_uniform(rng, l_p, d).with_requires_grad(true));
        let base_head_weight = xavier_uniform(rng, d, horizon).with_requires_grad(true);
        Ok(LinearBackbone {
            enc_weight,
            enc_bias: Tensor::zeros(&[d]).with_requires_grad(true),
            trend_weight,
            base_head_weight,
            base_head_bias: Tensor::zeros(&[horizon]).with_requires_grad(true),
            decomposition,
        })
    }

    pub fn l_p(&self) -> usize {
        self.enc_weight.rows()
    }

    pub fn d(&self) -> usize {
        self.enc_weight.cols()
    }

    pub fn horizon(&self) -> usize {
        self.base_head_weight.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> BackboneVars {
        BackboneVars {
            enc_weight: tape.leaf(&self.enc_weight),
            enc_bias: tape.leaf(&self.enc_bias),
            trend_weight: self.trend_weight.as_ref().map(|t| tape.leaf(t)),
            base_head_weight: tape.leaf(&self.base_head_weight),
            base_head_bias: tape.leaf(&self.base_head_bias),
        }
    }

    /// `h = x_norm W_enc + b_enc`, or with decomposition
    /// `h = seasonal W_enc + trend W_trend + b_enc`.
    pub fn encode(&self, tape: &mut Tape, vars: &BackboneVars, x_norm: Var) -> Result<Var> {
        let h = match (self.decomposition, vars.trend_weight) {
            (Some(window), Some(wt)) => {
                let trend = tape.moving_average(x_norm, window)?;
                let seasonal = tape.sub(x_norm, trend)?;
                let a = tape.matmul(seasonal, vars.enc_weight)?;
                let b = tape.matmul(trend, wt)?;
                tape.add(a, b)?
            }
            _ => tape.matmul(x_norm, vars.enc_weight)?,
        };
        tape.add(h, vars.enc_bias)
    }

    /// Base head in the normalized space: `h W_head + b_head`.
    pub fn baseline_predict(&self, tape: &mut Tape, vars: &BackboneVars, h: Var) -> Result<Var> {
        let y = tape.matmul(h, vars.base_head_weight)?;
        tape.add(y, vars.base_head_bias)
    }
}
