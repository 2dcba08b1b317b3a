//! ETT-style CSV: a header row, an optional leading `date` column, then
//! numeric channels.

use std::path::Path;

use super::SeriesFrame;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("nan") || c.eq_ignore_ascii_case("na")
}

/// Reads a CSV into a frame. Rows holding a missing value (empty, `NaN`,
/// `NA`) are dropped and counted; any other unparseable cell is an error
/// naming its 1-based data row and 1-based column. `targets` restricts and
/// orders the channels.
pub fn load_csv(path: &Path, targets: Option<&[String]>) -> Result<SeriesFrame> {
    let mut reader = ::csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(::csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            ::csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::Csv {
            row: 0,
            column: 0,
            message: "missing header".into(),
        });
    }
    if header.iter().any(|h| h.parse::<f64>().is_ok()) {
        return Err(Error::Csv {
            row: 0,
            column: 1 + header.iter().position(|h| h.parse::<f64>().is_ok()).unwrap(),
            message: "missing header (numeric field in first row)".into(),
        });
    }
    let has_date = header[0].eq_ignore_ascii_case("date");
    let first = has_date as usize;
    let columns: Vec<String> = header[first..].to_vec();
    if columns.is_empty() {
        return Err(Error::Data(format!("{}: no numeric columns", path.display())));
    }

    let mut values = Vec::new();
    let mut stamps = Vec::new();
    let mut dropped = 0;
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Csv {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Csv {
                row,
                column: record.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let mut parsed = Vec::with_capacity(columns.len());
        let mut missing = false;
        for (j, cell) in record.iter().enumerate().skip(first) {
            if is_missing(cell) {
                missing = true;
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Csv {
                row,
                column: j + 1,
                message: format!("cannot parse `{cell}` as a number"),
            })?;
            if !v.is_finite() {
                missing = true;
            }
            parsed.push(v);
        }
        if missing {
            dropped += 1;
            continue;
        }
        if has_date {
            stamps.push(record[0].to_string());
        }
        values.extend(parsed);
        rows += 1;
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} rows with missing values", path.display());
    }
    let values = Tensor::matrix(rows, columns.len(), values)?;
    let mut frame = SeriesFrame::new(values, columns, has_date.then_some(stamps))?;
    frame.dropped_rows = dropped;
    match targets {
        Some(names) => frame.select(names),
        None => Ok(frame),
    }
}

/// Writes a frame with a `date` column (timestamps or step indices).
/// Values use the shortest round-trip formatting, so reading back is exact.
pub fn write_csv(frame: &SeriesFrame, path: &Path) -> Result<()> {
    let mut w = ::csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let wrap = |e: ::csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut header = vec!["date".to_string()];
    header.extend(frame.columns.iter().cloned());
    w.write_record(&header).map_err(wrap)?;
    for t in 0..frame.len() {
        let stamp = match &frame.timestamps {
            Some(ts) => ts[t].clone(),
            None => t.to_string(),
        };
        let mut rec = vec![stamp];
        rec.extend(frame.values.row(t).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
