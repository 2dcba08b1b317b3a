use serde::{Deserialize, Serialize};

use crate::data::SplitWindows;
use crate::error::Result;
use crate::model::ForecastModel;
use crate::routing::RoutingTrace;

/// Forecast error over a split, in the dataset's z-scored units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// MSE at each horizon step.
    pub per_horizon: Vec<f64>,
    /// MSE over rows whose horizon overlaps a logged event, when any do.
    pub rare_event_mse: Option<f64>,
    pub rows: usize,
    pub event_rows: usize,
}

/// Routing decision for one evaluated (sample, channel) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sample: usize,
    pub channel: usize,
    /// Absolute index of the first forecast step.
    pub target_start: usize,
    pub event: bool,
    #[serde(flatten)]
    pub trace: RoutingTrace,
}

pub fn evaluate(model: &ForecastModel, split: &SplitWindows, batch: usize) -> Result<Metrics> {
    Ok(evaluate_traced(model, split, batch, false)?.0)
}

/// Evaluates in chunks of `batch` samples, optionally keeping every row's
/// routing trace.
pub fn evaluate_traced(
    model: &ForecastModel,
    split: &SplitWindows,
    batch: usize,
    keep_traces: bool,
) -> Result<(Metrics, Vec<TraceRecord>)> {
    let h = split.horizon;
    let c = split.channels();
    let mut per_h = vec![0.0; h];
    let (mut se, mut ae, mut ev_se) = (0.0, 0.0, 0.0);
    let (mut rows, mut ev_rows) = (0usize, 0usize);
    let mut traces = Vec::new();
    let samples: Vec<usize> = (0..split.samples()).collect();
    for chunk in samples.chunks(batch.max(1)) {
        let (x, y) = split.batch(chunk);
        let (pred, tr) = model.predict(&x)?;
        for r in 0..y.rows() {
            let global_row = chunk[0] * c + r;
            let event = split.event_rows.as_ref().is_some_and(|m| m[global_row]);
            let mut row_se = 0.0;
            for (j, (p, t)) in pred.row(r).iter().zip(y.row(r)).enumerate() {
                let d = p - t;
                row_se += d * d;
                ae += d.abs();
                per_h[j] += d * d;
            }
            se += row_se;
            if event {
                ev_se += row_se;
                ev_rows += 1;
            }
            rows += 1;
            if keep_traces {
                if let Some(t) = tr.get(r) {
                    let sample = chunk[r / c];
                    traces.push(TraceRecord {
                        sample,
                        channel: r % c,
                        target_start: split.span(sample).1,
                        event,
                        trace: t.clone(),
                    });
                }
            }
        }
    }
    let n = (rows * h) as f64;
    Ok((
        Metrics {
            mse: se / n,
            mae: ae / n,
            per_horizon: per_h.into_iter().map(|v| v / rows as f64).collect(),
            rare_event_mse: (ev_rows > 0).then(|| ev_se / (ev_rows * h) as f64),
            rows,
            event_rows: ev_rows,
        },
        traces,
    ))
}
