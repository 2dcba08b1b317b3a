//! Series containers, synthetic generation, CSV ingestion and windowing.

mod csv;
mod synth;
mod windows;

pub use self::csv::{load_csv, write_csv};
pub use synth::{read_events, synth_generate, write_events, Event, EventKind, SynthConfig};
pub use windows::{make_windows, SplitSpec, SplitWindows, WindowDataset, ZScore};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A multichannel series of `T` rows and `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    /// `[T, C]`.
    pub values: Tensor,
    pub columns: Vec<String>,
    pub timestamps: Option<Vec<String>>,
    /// Rows dropped at ingestion because they held missing values.
    pub dropped_rows: usize,
}

impl SeriesFrame {
    pub fn new(values: Tensor, columns: Vec<String>, timestamps: Option<Vec<String>>) -> Result<Self> {
        let (t, c) = values.dims();
        if values.shape().len() != 2 || columns.len() != c {
            return Err(Error::Data(format!(
                "frame has {} columns for a [{t}, {c}] value matrix",
                columns.len()
            )));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != t {
                return Err(Error::Data(format!("{} timestamps for {t} rows", ts.len())));
            }
        }
        if !values.is_finite() {
            return Err(Error::Data("frame holds non-finite values".into()));
        }
        Ok(SeriesFrame {
            values,
            columns,
            timestamps,
            dropped_rows: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.values.at(t, c)).collect()
    }

    /// Keeps only the named columns, in the order given.
    pub fn select(&self, names: &[String]) -> Result<SeriesFrame> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.columns
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::Data(format!("no column named `{n}`")))
            })
            .collect::<Result<_>>()?;
        let t = self.len();
        let mut data = Vec::with_capacity(t * idx.len());
        for r in 0..t {
            let row = self.values.row(r);
            data.extend(idx.iter().map(|&c| row[c]));
        }
        Ok(SeriesFrame {
            values: Tensor::matrix(t, idx.len(), data)?,
            columns: names.to_vec(),
            timestamps: self.timestamps.clone(),
            dropped_rows: self.dropped_rows,
        })
    }
}
