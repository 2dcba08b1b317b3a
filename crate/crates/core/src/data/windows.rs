//! Chronological splits, train-statistics z-scoring and sliding windows.
//!
//! Validation and test segments begin `L_p` rows before their border so
//! that their first look-back window ends exactly at the border.

use serde::{Deserialize, Serialize};

use super::{Event, SeriesFrame};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Borders of the three chronological splits: train is `[0, train_end)`,
/// validation `[train_end, val_end)`, test `[val_end, total)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: usize,
    pub val_end: usize,
    pub total: usize,
}

impl SplitSpec {
    pub fn new(train_end: usize, val_end: usize, total: usize) -> Result<Self> {
        if !(0 < train_end && train_end < val_end && val_end < total) {
            return Err(Error::Data(format!(
                "split borders must satisfy 0 < {train_end} < {val_end} < {total}"
            )));
        }
        Ok(SplitSpec {
            train_end,
            val_end,
            total,
        })
    }

    /// Hourly ETT layout: 12 months train, 4 validation, 4 test.
    pub fn ett_hourly() -> Self {
        SplitSpec {
            train_end: 12 * 30 * 24,
            val_end: 16 * 30 * 24,
            total: 20 * 30 * 24,
        }
    }

    /// `floor(train * T)` train rows, `floor(test * T)` test rows, the rest
    /// validation.
    pub fn fractions(total: usize, train: f64, test: f64) -> Result<Self> {
        if !(train > 0.0 && test > 0.0 && train + test < 1.0) {
            return Err(Error::Config(format!("split fractions train={train} test={test} are invalid")));
        }
        let n_train = (total as f64 * train) as usize;
        let n_test = (total as f64 * test) as usize;
        SplitSpec::new(n_train, total - n_test, total)
    }

    /// `[start, end)` rows of each split's segment, including the `l_p` lead-in
    /// of validation and test.
    pub fn segments(&self, l_p: usize) -> Result<[(usize, usize); 3]> {
        if l_p > self.train_end {
            return Err(Error::Data(format!(
                "look-back {l_p} exceeds the training segment ({} rows)",
                self.train_end
            )));
        }
        Ok([
            (0, self.train_end),
            (self.train_end - l_p, self.val_end),
            (self.val_end - l_p, self.total),
        ])
    }

    /// Number of look-back windows per segment, `len - l_p + 1`.
    pub fn lookback_counts(&self, l_p: usize) -> Result<[usize; 3]> {
        let seg = self.segments(l_p)?;
        Ok(seg.map(|(a, b)| (b - a + 1).saturating_sub(l_p)))
    }

    /// Number of complete (input, target) samples per segment,
    /// `len - l_p - h + 1`.
    pub fn sample_counts(&self, l_p: usize, h: usize) -> Result<[usize; 3]> {
        let seg = self.segments(l_p)?;
        Ok(seg.map(|(a, b)| (b - a + 1).saturating_sub(l_p + h)))
    }
}

/// Per-channel mean and standard deviation from the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    pub fn fit(values: &Tensor, rows: usize) -> Self {
        let c = values.cols();
        let n = rows as f64;
        let mut mean = vec![0.0; c];
        for t in 0..rows {
            for (m, v) in mean.iter_mut().zip(values.row(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for t in 0..rows {
            for (j, v) in values.row(t).iter().enumerate() {
                var[j] += (v - mean[j]) * (v - mean[j]);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(1e-8)).collect();
        ZScore { mean, std }
    }

    pub fn apply(&self, values: &Tensor) -> Tensor {
        let (t, c) = values.dims();
        let mut out = Vec::with_capacity(t * c);
        for r in 0..t {
            out.extend(values.row(r).iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j]));
        }
        Tensor::matrix(t, c, out).expect("same shape")
    }
}

/// One split's normalized segment and its window start offsets.
#[derive(Debug, Clone)]
pub struct SplitWindows {
    /// `[len, C]` z-scored values of the segment.
    pub values: Tensor,
    /// Absolute row index of the segment's first row.
    pub offset: usize,
    /// Window starts relative to the segment.
    pub starts: Vec<usize>,
    pub l_p: usize,
    pub horizon: usize,
    /// Per (sample, channel) row: whether the horizon overlaps a logged event.
    pub event_rows: Option<Vec<bool>>,
}

impl SplitWindows {
    pub fn samples(&self) -> usize {
        self.starts.len()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    /// Rows the model sees for one pass over the split (samples x channels).
    pub fn rows(&self) -> usize {
        self.samples() * self.channels()
    }

    /// Inputs `[B*C, L_p]` and targets `[B*C, H]` for the given samples.
    /// Row `b * C + c` holds channel `c` of sample `b`.
    pub fn batch(&self, samples: &[usize]) -> (Tensor, Tensor) {
        let c_len = self.channels();
        let r = samples.len() * c_len;
        let mut x = Vec::with_capacity(r * self.l_p);
        let mut y = Vec::with_capacity(r * self.horizon);
        for &s in samples {
            let start = self.starts[s];
            for c in 0..c_len {
                x.extend((start..start + self.l_p).map(|t| self.values.at(t, c)));
                let tgt = start + self.l_p;
                y.extend((tgt..tgt + self.horizon).map(|t| self.values.at(t, c)));
            }
        }
        (
            Tensor::matrix(r, self.l_p, x).expect("window shape"),
            Tensor::matrix(r, self.horizon, y).expect("window shape"),
        )
    }

    /// Absolute `[first input, first target, end)` rows of sample `s`.
    pub fn span(&self, s: usize) -> (usize, usize, usize) {
        let a = self.offset + self.starts[s];
        (a, a + self.l_p, a + self.l_p + self.horizon)
    }
}

#[derive(Debug, Clone)]
pub struct WindowDataset {
    pub train: SplitWindows,
    pub val: SplitWindows,
    pub test: SplitWindows,
    pub zscore: ZScore,
    pub split: SplitSpec,
}

/// Cuts the frame into z-scored train/val/test window sets. Statistics come
/// from the training rows only. With `events`, each split also records which
/// (sample, channel) horizons overlap an event.
pub fn make_windows(
    frame: &SeriesFrame,
    split: SplitSpec,
    l_p: usize,
    horizon: usize,
    stride: usize,
    events: Option<&[Event]>,
) -> Result<WindowDataset> {
    if l_p < 2 || horizon == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "windowing needs L_p >= 2, H >= 1, stride >= 1 (got {l_p}, {horizon}, {stride})"
        )));
    }
    if split.total != frame.len() {
        return Err(Error::Data(format!(
            "split covers {} rows but the frame has {}",
            split.total,
            frame.len()
        )));
    }
    let zscore = ZScore::fit(&frame.values, split.train_end);
    let normalized = zscore.apply(&frame.values);
    let c = frame.channels();
    let names = ["train", "val", "test"];
    let mut out = Vec::with_capacity(3);
    for (k, (a, b)) in split.segments(l_p)?.into_iter().enumerate() {
        let len = b - a;
        if len < l_p + horizon {
            return Err(Error::Data(format!(
                "{} segment has {len} rows, fewer than L_p + H = {}",
                names[k],
                l_p + horizon
            )));
        }
        let starts: Vec<usize> = (0..=len - l_p - horizon).step_by(stride).collect();
        let mut seg = Vec::with_capacity(len * c);
        for t in a..b {
            seg.extend_from_slice(normalized.row(t));
        }
        let mut w = SplitWindows {
            values: Tensor::matrix(len, c, seg)?,
            offset: a,
            starts,
            l_p,
            horizon,
            event_rows: None,
        };
        if let Some(ev) = events {
            let mut mask = Vec::with_capacity(w.rows());
            for s in 0..w.samples() {
                let (_, t0, t1) = w.span(s);
                for ch in 0..c {
                    mask.push(ev.iter().any(|e| e.overlaps(ch, t0, t1)));
                }
            }
            w.event_rows = Some(mask);
        }
        out.push(w);
    }
    let test = out.pop().expect("three splits");
    let val = out.pop().expect("three splits");
    let train = out.pop().expect("three splits");
    Ok(WindowDataset {
        train,
        val,
        test,
        zscore,
        split,
    })
}
