//! Dual-path context-aware routing.
//!
//! Each (sample, channel) window is compared against the common and rare
//! base sequences by Pearson correlation. The top-K common prototypes are
//! mixed with softmax weights; at most one rare prototype is switched on,
//! and only when its correlation clears the threshold. The selected latent
//! prototypes are concatenated with the backbone representation and
//! projected to the horizon.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{project_common, project_rare, xavier_uniform, BankVars, CONSTANT_STD};
use crate::error::{Error, Result};
use crate::numerics::{Reduce, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    /// Number of common prototypes mixed per window.
    pub k: usize,
    /// Rare activation threshold; activation needs `max(rho_r) > epsilon`.
    pub epsilon: f64,
    /// Softmax temperature for the common weights.
    pub tau: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            k: 4,
            epsilon: 0.6,
            tau: 0.5,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.k < 1 || self.k > m {
            return Err(Error::Config(format!("top-K count {} must lie in [1, M={m}]", self.k)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("temperature tau must be > 0, got {}", self.tau)));
        }
        if !(-1.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [-1, 1]", self.epsilon)));
        }
        Ok(())
    }
}

/// How selected common prototypes are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Softmax of the selected similarities over tau.
    #[default]
    Adaptive,
    /// Plain sum of the selected prototypes (unit weights).
    Additive,
    /// Uniform `1/K` weights.
    Mean,
}

/// Which banks take part in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Paths {
    pub common: bool,
    pub rare: bool,
}

impl Paths {
    pub const BOTH: Paths = Paths {
        common: true,
        rare: true,
    };

    pub fn count(self) -> usize {
        self.common as usize + self.rare as usize
    }
}

/// Per-window routing record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub rho_c: Vec<f64>,
    pub rho_r: Vec<f64>,
    pub i_c: Vec<usize>,
    pub i_r: Option<usize>,
    pub omega_c: Vec<f64>,
    pub omega_r: f64,
}

impl RoutingTrace {
    pub fn rho_max_c(&self) -> f64 {
        self.rho_c.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn rho_max_r(&self) -> f64 {
        self.rho_r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Sample Pearson correlation; 0 when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson needs equal lengths");
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let floor = n * CONSTANT_STD * CONSTANT_STD;
    if saa < floor || sbb < floor {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Centered rows scaled by their norm, floored so constant rows map to zero.
fn unit_centered(tape: &mut Tape, x: Var) -> Result<Var> {
    let len = tape.value(x).cols() as f64;
    let mean = tape.mean(x, Reduce::PerRow)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered)?;
    let ss = tape.sum(sq, Reduce::PerRow)?;
    let floored = tape.max_with_scalar(ss, len * CONSTANT_STD * CONSTANT_STD)?;
    let norm = tape.sqrt(floored)?;
    tape.div(centered, norm)
}

/// Pearson correlation of every row of `x` `[R, L]` with every row of
/// `sequences` `[M, L]`, giving `[R, M]`. Differentiable in both inputs.
pub fn pearson_matrix(tape: &mut Tape, x: Var, sequences: Var) -> Result<Var> {
    let (xl, sl) = (tape.value(x).cols(), tape.value(sequences).cols());
    if xl != sl || xl < 2 {
        return Err(Error::Shape {
            op: "pearson",
            shapes: vec![tape.value(x).shape().to_vec(), tape.value(sequences).shape().to_vec()],
        });
    }
    let xu = unit_centered(tape, x)?;
    let su = unit_centered(tape, sequences)?;
    let st = tape.transpose(su)?;
    tape.matmul(xu, st)
}

/// Similarities of one window `[L]` against `[count, L]` sequences.
pub fn similarity_profile(tape: &mut Tape, x: Var, sequences: Var) -> Result<Var> {
    let row = if tape.value(x).shape().len() == 1 {
        // [L] -> [1, L] by broadcasting onto a zero row.
        let zeros = tape.constant(Tensor::zeros(&[1, tape.value(x).len()]));
        tape.add(zeros, x)?
    } else {
        x
    };
    pearson_matrix(tape, row, sequences)
}

/// Indices of the `k` largest values, best first; ties go to the lower index.
pub fn select_top_k(rho: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rho.len()).collect();
    idx.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Top-K selection and gate weights for one window.
pub fn route_common(rho_c: &[f64], cfg: &RoutingConfig) -> (Vec<usize>, Vec<f64>) {
    let idx = select_top_k(rho_c, cfg.k);
    let scaled: Vec<f64> = idx.iter().map(|&i| rho_c[i] / cfg.tau).collect();
    (idx, softmax(&scaled))
}

/// Gate weights for already-selected prototypes under a fusion mode.
pub fn fusion_weights(rho_c: &[f64], idx: &[usize], cfg: &RoutingConfig, fusion: Fusion) -> Vec<f64> {
    match fusion {
        Fusion::Adaptive => softmax(&idx.iter().map(|&i| rho_c[i] / cfg.tau).collect::<Vec<_>>()),
        Fusion::Additive => vec![1.0; idx.len()],
        Fusion::Mean => vec![1.0 / idx.len() as f64; idx.len()],
    }
}

/// Arg-max rare prototype if its similarity strictly exceeds `epsilon`.
/// Similarities are clamped to `[-1, 1]` first, since rounding can push an
/// exact match a few ulps past 1.
pub fn route_rare(rho_r: &[f64], epsilon: f64) -> Option<usize> {
    let best = select_top_k(rho_r, 1).into_iter().next()?;
    (rho_r[best].clamp(-1.0, 1.0) > epsilon).then_some(best)
}

/// Projection from `[h; z_c; z_r]` to the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    /// `[(1 + active paths) * D, H]`.
    pub w_o: Tensor,
    pub b_o: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w_o: Var,
    pub b_o: Var,
}

impl FusionHead {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, paths: Paths, horizon: usize) -> Self {
        let fan_in = (1 + paths.count()) * d;
        FusionHead {
            w_o: xavier_uniform(rng, fan_in, horizon).with_requires_grad(true),
            b_o: Tensor::zeros(&[horizon]).with_requires_grad(true),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            w_o: tape.leaf(&self.w_o),
            b_o: tape.leaf(&self.b_o),
        }
    }
}

/// Dense `[R, M]` mixing matrix: row `r` holds the gate weights of window `r`
/// at its selected columns and zeros elsewhere. Selection itself is not
/// differentiated; adaptive weights are differentiable through `rho_c`.
pub fn common_weights(
    tape: &mut Tape,
    rho_c: Var,
    idx: &[Vec<usize>],
    cfg: &RoutingConfig,
    fusion: Fusion,
) -> Result<Var> {
    let (rows, m) = tape.value(rho_c).dims();
    match fusion {
        Fusion::Adaptive => {
            let picked = tape.gather_cols(rho_c, idx)?;
            let scaled = tape.div_scalar(picked, cfg.tau)?;
            let w = tape.softmax(scaled)?;
            tape.scatter_cols(w, idx, m)
        }
        Fusion::Additive | Fusion::Mean => {
            let mut dense = Tensor::zeros(&[rows, m]);
            for (r, row) in idx.iter().enumerate() {
                let w = if fusion == Fusion::Mean { 1.0 / row.len() as f64 } else { 1.0 };
                for &j in row {
                    dense.row_mut(r)[j] = w;
                }
            }
            Ok(tape.constant(dense))
        }
    }
}

/// `[h; z_c; z_r] W_o + b_o` where `z_c = weights_c p_c` and
/// `z_r = onehot_r p_r`. Absent paths are left out of the concatenation.
pub fn fuse(
    tape: &mut Tape,
    h: Var,
    common: Option<(Var, Var)>,
    rare: Option<(Var, Var)>,
    head: &HeadVars,
) -> Result<Var> {
    let mut parts = vec![h];
    if let Some((weights, p_c)) = common {
        parts.push(tape.matmul(weights, p_c)?);
    }
    if let Some((onehot, p_r)) = rare {
        parts.push(tape.matmul(onehot, p_r)?);
    }
    let cat = if parts.len() == 1 { h } else { tape.concat_cols(&parts)? };
    let y = tape.matmul(cat, head.w_o)?;
    tape.add(y, head.b_o)
}

/// Result of routing a batch of windows.
#[derive(Debug)]
pub struct DpadForward {
    /// `[R, H]` prediction in the normalized window space.
    pub y: Var,
    pub rho_c: Option<Var>,
    pub rho_r: Option<Var>,
    pub p_c: Option<Var>,
    pub traces: Vec<RoutingTrace>,
    /// Windows whose input was constant (similarity forced to 0).
    pub degenerate: usize,
}

/// Routes and fuses a batch. `x` is `[R, L_p]` normalized windows, `h` is
/// `[R, D]`.
#[allow(clippy::too_many_arguments)]
pub fn forward_dpad(
    tape: &mut Tape,
    x: Var,
    h: Var,
    bank: &BankVars,
    head: &HeadVars,
    cfg: &RoutingConfig,
    fusion: Fusion,
    paths: Paths,
) -> Result<DpadForward> {
    let rows = tape.value(x).rows();
    let degenerate = (0..rows)
        .filter(|&r| {
            let w = tape.value(x).row(r);
            pearson(w, w) == 0.0
        })
        .count();
    let mut traces: Vec<RoutingTrace> = (0..rows)
        .map(|_| RoutingTrace {
            rho_c: Vec::new(),
            rho_r: Vec::new(),
            i_c: Vec::new(),
            i_r: None,
            omega_c: Vec::new(),
            omega_r: 0.0,
        })
        .collect();

    let mut common = None;
    let (mut rho_c_var, mut p_c_var) = (None, None);
    if paths.common {
        let m = tape.value(bank.s_c).rows();
        cfg.validate(m)?;
        let rho_c = pearson_matrix(tape, x, bank.s_c)?;
        let idx: Vec<Vec<usize>> = (0..rows).map(|r| select_top_k(tape.value(rho_c).row(r), cfg.k)).collect();
        for (r, t) in traces.iter_mut().enumerate() {
            let rho = tape.value(rho_c).row(r);
            t.omega_c = fusion_weights(rho, &idx[r], cfg, fusion);
            t.rho_c = rho.to_vec();
            t.i_c = idx[r].clone();
        }
        let weights = common_weights(tape, rho_c, &idx, cfg, fusion)?;
        let p_c = project_common(tape, bank)?;
        common = Some((weights, p_c));
        rho_c_var = Some(rho_c);
        p_c_var = Some(p_c);
    }

    let mut rare = None;
    let mut rho_r_var = None;
    if paths.rare {
        let rho_r = pearson_matrix(tape, x, bank.s_r)?;
        let n = tape.value(bank.s_r).rows();
        let mut onehot = Tensor::zeros(&[rows, n]);
        for (r, t) in traces.iter_mut().enumerate() {
            let rho = tape.value(rho_r).row(r);
            t.i_r = route_rare(rho, cfg.epsilon);
            t.rho_r = rho.to_vec();
            if let Some(j) = t.i_r {
                onehot.row_mut(r)[j] = 1.0;
                t.omega_r = 1.0;
            }
        }
        let onehot = tape.constant(onehot);
        let p_r = project_rare(tape, bank)?;
        rare = Some((onehot, p_r));
        rho_r_var = Some(rho_r);
    }

    let y = fuse(tape, h, common, rare, head)?;
    Ok(DpadForward {
        y,
        rho_c: rho_c_var,
        rho_r: rho_r_var,
        p_c: p_c_var,
        traces,
        degenerate,
    })
}
