//! Synthetic series: trend, seasonality, noise and logged rare events.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SeriesFrame;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of time steps.
    pub t: usize,
    /// Number of channels.
    pub c: usize,
    /// Per-channel trend slopes are drawn uniformly from this range
    /// (units per step).
    pub trend_slope: (f64, f64),
    pub seasonal_amplitudes: Vec<f64>,
    pub seasonal_periods: Vec<f64>,
    pub noise_std: f64,
    /// Expected events per 1000 steps (summed over channels).
    pub event_rate: f64,
    /// Absolute event magnitude range; the sign is random.
    pub event_magnitude: (f64, f64),
    /// Length range of level-shift events. Spikes last one step.
    pub event_duration: (usize, usize),
    /// Probability that an event is a spike rather than a level shift.
    pub spike_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            t: 10_000,
            c: 3,
            trend_slope: (-2e-4, 2e-4),
            seasonal_amplitudes: vec![1.0, 0.5],
            seasonal_periods: vec![24.0, 96.0],
            noise_std: 0.2,
            event_rate: 5.0,
            event_magnitude: (2.0, 4.0),
            event_duration: (8, 48),
            spike_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t < 2 || self.c == 0 {
            return bad(format!("synthetic series needs T >= 2 and C >= 1, got T={} C={}", self.t, self.c));
        }
        if self.seasonal_amplitudes.len() != self.seasonal_periods.len() {
            return bad("seasonal_amplitudes and seasonal_periods differ in length".into());
        }
        if self.seasonal_periods.iter().any(|p| !(*p > 0.0)) {
            return bad("seasonal periods must be > 0".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if !(self.event_rate >= 0.0 && self.event_rate <= 1000.0) {
            return bad(format!("event_rate must lie in [0, 1000], got {}", self.event_rate));
        }
        let (lo, hi) = self.event_magnitude;
        if !(lo >= 0.0 && hi >= lo) {
            return bad(format!("event_magnitude range ({lo}, {hi}) is invalid"));
        }
        let (dlo, dhi) = self.event_duration;
        if dlo < 1 || dhi < dlo {
            return bad(format!("event_duration range ({dlo}, {dhi}) needs 1 <= lo <= hi"));
        }
        if !(self.trend_slope.1 >= self.trend_slope.0) {
            return bad("trend_slope range is reversed".into());
        }
        if !(0.0..=1.0).contains(&self.spike_fraction) {
            return bad(format!("spike_fraction must lie in [0, 1], got {}", self.spike_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Spike,
    LevelShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub start: usize,
    pub duration: usize,
    pub magnitude: f64,
    pub kind: EventKind,
    pub channel: usize,
}

impl Event {
    /// True when `[a, b)` on `channel` intersects the event's span.
    pub fn overlaps(&self, channel: usize, a: usize, b: usize) -> bool {
        channel == self.channel && a < self.start + self.duration && self.start < b
    }
}

/// Generates `trend + seasonality + noise + events`. Each time step starts an
/// event with probability `event_rate / 1000`, on one uniformly chosen
/// channel. Seasonal component `k` on channel `c` is phase-shifted by
/// `2 pi c / C`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(SeriesFrame, Vec<Event>)> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, Stream::Synth);
    let (t_len, c_len) = (cfg.t, cfg.c);

    let slopes: Vec<f64> = (0..c_len)
        .map(|_| {
            let (lo, hi) = cfg.trend_slope;
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        })
        .collect();

    let mut values = vec![0.0; t_len * c_len];
    for t in 0..t_len {
        for c in 0..c_len {
            let phase = 2.0 * PI * c as f64 / c_len as f64;
            let mut v = slopes[c] * t as f64;
            for (a, p) in cfg.seasonal_amplitudes.iter().zip(&cfg.seasonal_periods) {
                v += a * (2.0 * PI * t as f64 / p + phase).sin();
            }
            values[t * c_len + c] = v;
        }
    }

    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    let p = cfg.event_rate / 1000.0;
    let mut events = Vec::new();
    for start in 0..t_len {
        if p == 0.0 || !rng.random_bool(p) {
            continue;
        }
        let channel = rng.random_range(0..c_len);
        let kind = if rng.random_bool(cfg.spike_fraction) {
            EventKind::Spike
        } else {
            EventKind::LevelShift
        };
        let duration = match kind {
            EventKind::Spike => 1,
            EventKind::LevelShift => rng.random_range(cfg.event_duration.0..=cfg.event_duration.1),
        };
        let (lo, hi) = cfg.event_magnitude;
        let size = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let magnitude = if rng.random_bool(0.5) { size } else { -size };
        for t in start..(start + duration).min(t_len) {
            values[t * c_len + channel] += magnitude;
        }
        events.push(Event {
            start,
            duration,
            magnitude,
            kind,
            channel,
        });
    }

    let columns = (0..c_len).map(|c| format!("ch{c}")).collect();
    let timestamps = (0..t_len).map(hourly_timestamp).collect();
    let frame = SeriesFrame::new(Tensor::matrix(t_len, c_len, values)?, columns, Some(timestamps))?;
    Ok((frame, events))
}

/// `2020-01-01 00:00:00` plus `step` hours.
fn hourly_timestamp(step: usize) -> String {
    let days = (step / 24) as i64;
    let hour = step % 24;
    // Civil-from-days (Howard Hinnant), offset to 2020-01-01 = day 18262.
    let z = days + 18262 + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = yoe + era * 400 + (m <= 2) as i64;
    format!("{y:04}-{m:02}-{d:02} {hour:02}:00:00")
}

pub fn write_events(events: &[Event], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(events)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
