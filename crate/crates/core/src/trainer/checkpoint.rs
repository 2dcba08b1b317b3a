//! Named-tensor blob for backbone/head parameters and the history CSV.
//!
//! Blob layout (little-endian): magic `DPADMODL`, `u32` version, `u32`
//! tensor count, then per tensor `u32` name length, UTF-8 name, `u32` rank,
//! `u32` dims, and the `f64` values.

use std::path::Path;

use super::EpochRecord;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MODEL_MAGIC: &[u8; 8] = b"DPADMODL";
const MODEL_VERSION: u32 = 1;

pub fn encode_model(tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MODEL_MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic"));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.fail("tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        if rank > 2 {
            return Err(r.fail(format!("tensor `{name}` has rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(out)
}

const HISTORY_HEADER: &str = "epoch,train_mse,val_mse,sep,rare,div,total,rare_activation_rate";

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut text = String::from(HISTORY_HEADER);
    text.push('\n');
    for r in history {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.train_mse, r.val_mse, r.sep, r.rare, r.div, r.total, r.rare_activation_rate
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::Csv {
            row: 0,
            column: 0,
            message: "unexpected history header".into(),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 8 {
                return Err(Error::Csv {
                    row: i + 1,
                    column: cells.len(),
                    message: "expected 8 fields".into(),
                });
            }
            let f = |j: usize| -> Result<f64> {
                cells[j].parse().map_err(|_| Error::Csv {
                    row: i + 1,
                    column: j + 1,
                    message: format!("cannot parse `{}`", cells[j]),
                })
            };
            Ok(EpochRecord {
                epoch: f(0)? as usize,
                train_mse: f(1)?,
                val_mse: f(2)?,
                sep: f(3)?,
                rare: f(4)?,
                div: f(5)?,
                total: f(6)?,
                rare_activation_rate: f(7)?,
            })
        })
        .collect()
}
