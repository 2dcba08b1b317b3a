//! Learnable common/rare prototype bank.
//!
//! Each bank holds raw base sequences (the shapes routing compares against)
//! and an affine projection into the shared latent space. Everything is
//! trainable.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{sample_rare, GpSampler, KernelMixtureConfig, RareInitConfig};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{stream, Stream};

pub const BANK_MAGIC: &[u8; 8] = b"DPADBANK";
pub const BANK_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 5;

/// Sequences with standard deviation below this are treated as constant.
pub const CONSTANT_STD: f64 = 1e-12;
const MAX_RESAMPLE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    /// Common prototype count.
    pub m: usize,
    /// Rare prototype count.
    pub n: usize,
    /// Latent dimension.
    pub d: usize,
    /// Base sequence length; equals the look-back window.
    pub l_p: usize,
    pub kernel: KernelMixtureConfig,
    pub rare: RareInitConfig,
    /// Each common prototype scales the kernel lengthscale and period by a
    /// factor drawn uniformly from this range.
    pub hyper_jitter: (f64, f64),
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            m: 64,
            n: 12,
            d: 128,
            l_p: 96,
            kernel: KernelMixtureConfig::default(),
            rare: RareInitConfig::default(),
            hyper_jitter: (0.5, 2.0),
            seed: 0,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=1024).contains(&self.m) {
            return Err(Error::Config(format!("common bank size M={} outside [1, 1024]", self.m)));
        }
        if !(1..=256).contains(&self.n) {
            return Err(Error::Config(format!("rare bank size N={} outside [1, 256]", self.n)));
        }
        if self.d == 0 {
            return Err(Error::Config("latent dimension D must be >= 1".into()));
        }
        if self.l_p < 2 {
            return Err(Error::Config(format!("base sequence length {} must be >= 2", self.l_p)));
        }
        let (lo, hi) = self.hyper_jitter;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("invalid hyper_jitter range ({lo}, {hi})")));
        }
        self.kernel.validate()?;
        RareInitConfig {
            length: self.l_p,
            ..self.rare.clone()
        }
        .validate()
    }
}

/// The dual prototype bank. Field order is the on-disk payload order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// `[M, L_p]` common base sequences.
    pub s_c: Tensor,
    /// `[N, L_p]` rare base sequences.
    pub s_r: Tensor,
    pub proj_c_weight: Tensor,
    pub proj_c_bias: Tensor,
    pub proj_r_weight: Tensor,
    pub proj_r_bias: Tensor,
}

/// Tape handles for a bound [`PrototypeBank`].
#[derive(Debug, Clone, Copy)]
pub struct BankVars {
    pub s_c: Var,
    pub s_r: Var,
    pub proj_c_weight: Var,
    pub proj_c_bias: Var,
    pub proj_r_weight: Var,
    pub proj_r_bias: Var,
}

fn row_std(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Lag-1 sample autocorrelation of a sequence (0 for constant input).
pub fn lag1_autocorr(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let denom: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if denom <= 0.0 {
        return 0.0;
    }
    let num: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    num / denom
}

pub(crate) fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(fan_in, fan_out, data).unwrap()
}

fn non_constant<F: FnMut() -> Result<Vec<f64>>>(mut draw: F, what: &str) -> Result<Vec<f64>> {
    for _ in 0..MAX_RESAMPLE {
        let row = draw()?;
        if row_std(&row) >= CONSTANT_STD {
            return Ok(row);
        }
    }
    Err(Error::Config(format!(
        "{what} prototype stayed constant after {MAX_RESAMPLE} resamples"
    )))
}

impl PrototypeBank {
    /// Draws a fresh bank from `cfg`. Deterministic in `cfg.seed`.
    pub fn init(cfg: &BankConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, Stream::Bank);
        let (lo, hi) = cfg.hyper_jitter;

        let mut s_c = Vec::with_capacity(cfg.m * cfg.l_p);
        for _ in 0..cfg.m {
            let kernel = KernelMixtureConfig {
                rbf_lengthscale: cfg.kernel.rbf_lengthscale * rng.random_range(lo..=hi),
                periodic_period: cfg.kernel.periodic_period * rng.random_range(lo..=hi),
                ..cfg.kernel.clone()
            };
            let sampler = GpSampler::new(cfg.l_p, &kernel)?;
            s_c.extend(non_constant(|| Ok(sampler.sample(&mut rng)), "common")?);
        }

        let rare = RareInitConfig {
            length: cfg.l_p,
            ..cfg.rare.clone()
        };
        let mut s_r = Vec::with_capacity(cfg.n * cfg.l_p);
        for _ in 0..cfg.n {
            s_r.extend(non_constant(|| Ok(sample_rare(&rare, &mut rng)?.into_data()), "rare")?);
        }

        let proj_c_weight = xavier_uniform(&mut rng, cfg.l_p, cfg.d);
        let proj_r_weight = xavier_uniform(&mut rng, cfg.l_p, cfg.d);
        let bank = PrototypeBank {
            s_c: Tensor::matrix(cfg.m, cfg.l_p, s_c)?,
            s_r: Tensor::matrix(cfg.n, cfg.l_p, s_r)?,
            proj_c_weight,
            proj_c_bias: Tensor::zeros(&[cfg.d]),
            proj_r_weight,
            proj_r_bias: Tensor::zeros(&[cfg.d]),
        };
        Ok(bank.trainable())
    }

    fn trainable(mut self) -> Self {
        for t in self.tensors_mut() {
            t.set_requires_grad(true);
        }
        self
    }

    pub fn m(&self) -> usize {
        self.s_c.rows()
    }

    pub fn n(&self) -> usize {
        self.s_r.rows()
    }

    pub fn l_p(&self) -> usize {
        self.s_c.cols()
    }

    pub fn d(&self) -> usize {
        self.proj_c_weight.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.s_c,
            &self.s_r,
            &self.proj_c_weight,
            &self.proj_c_bias,
            &self.proj_r_weight,
            &self.proj_r_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.s_c,
            &mut self.s_r,
            &mut self.proj_c_weight,
            &mut self.proj_c_bias,
            &mut self.proj_r_weight,
            &mut self.proj_r_bias,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (m, l, n, d) = (self.m(), self.l_p(), self.n(), self.d());
        let expect: [(&Tensor, Vec<usize>); 6] = [
            (&self.s_c, vec![m, l]),
            (&self.s_r, vec![n, l]),
            (&self.proj_c_weight, vec![l, d]),
            (&self.proj_c_bias, vec![d]),
            (&self.proj_r_weight, vec![l, d]),
            (&self.proj_r_bias, vec![d]),
        ];
        for (t, shape) in &expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "bank",
                    shapes: vec![t.shape().to_vec(), shape.clone()],
                });
            }
        }
        if m == 0 || n == 0 || d == 0 || l < 2 {
            return Err(Error::Config(format!("degenerate bank dims M={m} N={n} L_p={l} D={d}")));
        }
        Ok(())
    }

    /// Records every bank tensor on the tape.
    pub fn bind(&self, tape: &mut Tape) -> BankVars {
        BankVars {
            s_c: tape.leaf(&self.s_c),
            s_r: tape.leaf(&self.s_r),
            proj_c_weight: tape.leaf(&self.proj_c_weight),
            proj_c_bias: tape.leaf(&self.proj_c_bias),
            proj_r_weight: tape.leaf(&self.proj_r_weight),
            proj_r_bias: tape.leaf(&self.proj_r_bias),
        }
    }

    /// Mean lag-1 autocorrelation of the common and rare base sequences.
    pub fn mean_autocorr(&self) -> (f64, f64) {
        let mean = |t: &Tensor| (0..t.rows()).map(|i| lag1_autocorr(t.row(i))).sum::<f64>() / t.rows() as f64;
        (mean(&self.s_c), mean(&self.s_r))
    }
}

/// `S W + b`, one latent row per base sequence.
pub fn project(tape: &mut Tape, sequences: Var, weight: Var, bias: Var) -> Result<Var> {
    let xw = tape.matmul(sequences, weight)?;
    tape.add(xw, bias)
}

/// Latent common prototypes `[M, D]`.
pub fn project_common(tape: &mut Tape, bank: &BankVars) -> Result<Var> {
    project(tape, bank.s_c, bank.proj_c_weight, bank.proj_c_bias)
}

/// Latent rare prototypes `[N, D]`.
pub fn project_rare(tape: &mut Tape, bank: &BankVars) -> Result<Var> {
    project(tape, bank.s_r, bank.proj_r_weight, bank.proj_r_bias)
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Payload size in `f64`s for the given dimensions.
pub fn payload_len(m: usize, n: usize, l_p: usize, d: usize) -> usize {
    m * l_p + n * l_p + 2 * (l_p * d + d)
}

/// Serializes the bank: `DPADBANK`, version, M, N, L_p, D (u32 LE), then
/// every tensor as little-endian f64 in field order.
pub fn encode_bank(bank: &PrototypeBank) -> Vec<u8> {
    let dims = [bank.m(), bank.n(), bank.l_p(), bank.d()];
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * payload_len(dims[0], dims[1], dims[2], dims[3]));
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&BANK_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for t in bank.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_bank(bytes: &[u8], path: &Path) -> Result<PrototypeBank> {
    let err = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(err(bytes.len(), format!("header needs {HEADER_LEN} bytes")));
    }
    if &bytes[..8] != BANK_MAGIC {
        return Err(err(0, "bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != BANK_VERSION {
        return Err(err(8, format!("unsupported version {version}")));
    }
    let (m, n, l_p, d) = (
        u32_at(12) as usize,
        u32_at(16) as usize,
        u32_at(20) as usize,
        u32_at(24) as usize,
    );
    let expected = HEADER_LEN + 8 * payload_len(m, n, l_p, d);
    if bytes.len() != expected {
        return Err(err(
            bytes.len().min(expected),
            format!("payload length {} does not match header (expected {expected})", bytes.len()),
        ));
    }
    let mut floats = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |shape: Vec<usize>| {
        let len = shape.iter().product();
        Tensor::new(shape, floats.by_ref().take(len).collect())
    };
    let bank = PrototypeBank {
        s_c: take(vec![m, l_p])?,
        s_r: take(vec![n, l_p])?,
        proj_c_weight: take(vec![l_p, d])?,
        proj_c_bias: take(vec![d])?,
        proj_r_weight: take(vec![l_p, d])?,
        proj_r_bias: take(vec![d])?,
    }
    .trainable();
    bank.validate().map_err(|e| err(HEADER_LEN, e.to_string()))?;
    Ok(bank)
}

/// Writes the bank file and a JSON sidecar (`<path>.json`) holding `cfg`.
pub fn export_bank(bank: &PrototypeBank, cfg: &BankConfig, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_bank(bank)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

pub fn import_bank(path: &Path) -> Result<PrototypeBank> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bank(&bytes, path)
}

/// Reads the provenance sidecar written by [`export_bank`].
pub fn import_bank_config(path: &Path) -> Result<BankConfig> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}
