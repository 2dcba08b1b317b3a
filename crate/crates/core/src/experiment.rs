//! End-to-end runs: data loading, training, evaluation, checkpoints,
//! comparisons and exports.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bank::{export_bank, import_bank, PrototypeBank};
use crate::config::{variant_label, Ablation, RunConfig, SplitChoice};
use crate::data::{
    load_csv, make_windows, read_events, synth_generate, Event, SeriesFrame, SplitSpec, WindowDataset,
};
use crate::error::{Error, Result};
use crate::model::{ForecastModel, Variant};
use crate::numerics::Tensor;
use crate::trainer::{
    decode_model, encode_model, evaluate, evaluate_traced, read_history, train, write_history, EpochRecord, Metrics,
    TrainReport,
};

/// A frame, its optional event log, and the windowed splits.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub frame: SeriesFrame,
    pub events: Option<Vec<Event>>,
    pub dataset: WindowDataset,
}

/// Produces the frame for `seed`: the configured CSV, or a synthetic series
/// drawn with that seed.
pub fn load_frame(cfg: &RunConfig, seed: u64) -> Result<(SeriesFrame, Option<Vec<Event>>)> {
    match &cfg.data.csv {
        Some(path) => {
            let frame = load_csv(path, cfg.data.targets.as_deref())?;
            let events = cfg.data.events.as_deref().map(read_events).transpose()?;
            Ok((frame, events))
        }
        None => {
            let mut synth = cfg.data.synth.clone();
            synth.seed = seed;
            let (frame, events) = synth_generate(&synth)?;
            Ok((frame, Some(events)))
        }
    }
}

pub fn split_for(cfg: &RunConfig, total: usize) -> Result<SplitSpec> {
    match cfg.data.split {
        SplitChoice::Fractions { train, test } => SplitSpec::fractions(total, train, test),
        SplitChoice::EttHourly => {
            let s = SplitSpec::ett_hourly();
            if total < s.total {
                return Err(Error::Data(format!("ETT hourly split needs {} rows, found {total}", s.total)));
            }
            Ok(s)
        }
        SplitChoice::Borders { train_end, val_end } => SplitSpec::new(train_end, val_end, total),
    }
}

pub fn load_data(cfg: &RunConfig, seed: u64) -> Result<LoadedData> {
    let (mut frame, events) = load_frame(cfg, seed)?;
    let split = split_for(cfg, frame.len())?;
    if split.total < frame.len() {
        // ETT files carry trailing rows past the last border.
        let c = frame.channels();
        let data = frame.values.data()[..split.total * c].to_vec();
        frame.values = Tensor::matrix(split.total, c, data)?;
        if let Some(ts) = &mut frame.timestamps {
            ts.truncate(split.total);
        }
    }
    let dataset = make_windows(
        &frame,
        split,
        cfg.model.bank.l_p,
        cfg.model.horizon,
        cfg.data.stride,
        events.as_deref(),
    )?;
    Ok(LoadedData {
        frame,
        events,
        dataset,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub label: String,
    pub seed: u64,
    pub model: ForecastModel,
    pub report: TrainReport,
    pub val: Metrics,
    pub test: Metrics,
    pub seconds: f64,
}

/// Trains and evaluates one model on already-loaded data.
pub fn run_on(cfg: &RunConfig, data: &WindowDataset, seed: u64) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut model = ForecastModel::init(&cfg.model, seed)?;
    let report = train(&mut model, data, &cfg.train, &cfg.loss, seed)?;
    let val = evaluate(&model, &data.val, cfg.train.eval_batch)?;
    let test = evaluate(&model, &data.test, cfg.train.eval_batch)?;
    Ok(RunOutcome {
        label: variant_label(&cfg.model),
        seed,
        model,
        report,
        val,
        test,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_once(cfg: &RunConfig, seed: u64) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = load_data(cfg, seed)?;
    run_on(cfg, &data.dataset, seed)
}

/// Worker count from `DPAD_THREADS`, else the machine's parallelism.
pub fn thread_budget() -> usize {
    std::env::var("DPAD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs independent jobs on up to `threads` workers. Results keep job order,
/// and each job is deterministic on its own, so the output does not depend
/// on scheduling.
pub fn run_parallel<T, F>(jobs: usize, threads: usize, f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs {
                    break;
                }
                let r = f(i);
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_mse: f64,
    pub test_mae: f64,
    pub rare_event_mse: Option<f64>,
    pub epochs: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub label: String,
    pub runs: Vec<SeedResult>,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub mean_mae: f64,
    pub std_mae: f64,
    pub mean_rare_event_mse: Option<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl VariantSummary {
    pub fn new(label: String, runs: Vec<SeedResult>) -> Self {
        let (mean_mse, std_mse) = mean_std(&runs.iter().map(|r| r.test_mse).collect::<Vec<_>>());
        let (mean_mae, std_mae) = mean_std(&runs.iter().map(|r| r.test_mae).collect::<Vec<_>>());
        let rare: Option<Vec<f64>> = runs.iter().map(|r| r.rare_event_mse).collect();
        VariantSummary {
            label,
            runs,
            mean_mse,
            std_mse,
            mean_mae,
            std_mae,
            mean_rare_event_mse: rare.map(|v| mean_std(&v).0),
        }
    }
}

/// `(base - other) / base`.
pub fn relative_improvement(base: f64, other: f64) -> f64 {
    (base - other) / base
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: VariantSummary,
    pub dpad: VariantSummary,
    pub improvement_mse: f64,
    pub improvement_mae: f64,
    pub improvement_rare_event_mse: Option<f64>,
    pub seconds: f64,
}

fn seed_result(o: &RunOutcome) -> SeedResult {
    SeedResult {
        seed: o.seed,
        test_mse: o.test.mse,
        test_mae: o.test.mae,
        rare_event_mse: o.test.rare_event_mse,
        epochs: o.report.history.len(),
        seconds: o.seconds,
    }
}

/// Trains every `(variant, seed)` pair and groups the results by variant.
/// Each seed's data is loaded once and shared across its variants.
pub fn run_variants(cfg: &RunConfig, variants: &[RunConfig], threads: usize) -> Result<Vec<VariantSummary>> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.repetitions as u64).map(|r| cfg.seed + r).collect();
    let datasets: Vec<LoadedData> = run_parallel(seeds.len(), threads, |i| load_data(cfg, seeds[i]))
        .into_iter()
        .collect::<Result<_>>()?;
    let jobs = variants.len() * seeds.len();
    let outcomes = run_parallel(jobs, threads, |j| {
        let (v, s) = (j / seeds.len(), j % seeds.len());
        let out = run_on(&variants[v], &datasets[s].dataset, seeds[s])?;
        log::info!("{} seed {}: test mse {:.5} ({:.1}s)", out.label, out.seed, out.test.mse, out.seconds);
        Ok(seed_result(&out))
    });
    let mut outcomes = outcomes.into_iter();
    variants
        .iter()
        .map(|v| {
            let runs = outcomes.by_ref().take(seeds.len()).collect::<Result<Vec<_>>>()?;
            Ok(VariantSummary::new(variant_label(&v.model), runs))
        })
        .collect()
}

/// Backbone-only versus backbone with prototypes, over `cfg.repetitions`
/// seeds.
pub fn compare(cfg: &RunConfig, threads: usize) -> Result<Comparison> {
    let start = Instant::now();
    let base = cfg.with_ablation(Ablation::NoDdp);
    let mut dpad = cfg.clone();
    if dpad.model.variant == Variant::NoDdp {
        dpad.model.variant = Variant::Full;
    }
    let mut summaries = run_variants(cfg, &[base, dpad], threads)?.into_iter();
    let baseline = summaries.next().expect("two variants");
    let dpad = summaries.next().expect("two variants");
    let improvement_rare_event_mse = match (baseline.mean_rare_event_mse, dpad.mean_rare_event_mse) {
        (Some(b), Some(d)) => Some(relative_improvement(b, d)),
        _ => None,
    };
    Ok(Comparison {
        improvement_mse: relative_improvement(baseline.mean_mse, dpad.mean_mse),
        improvement_mae: relative_improvement(baseline.mean_mae, dpad.mean_mae),
        improvement_rare_event_mse,
        baseline,
        dpad,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// The full model plus each ablation of [`Ablation::STUDY`].
pub fn ablation_study(cfg: &RunConfig, threads: usize) -> Result<Vec<VariantSummary>> {
    let mut full = cfg.clone();
    Ablation::Full.apply(&mut full.model);
    Ablation::Fusion(crate::routing::Fusion::Adaptive).apply(&mut full.model);
    let mut variants = vec![full.clone()];
    variants.extend(Ablation::STUDY.iter().map(|a| full.with_ablation(*a)));
    run_variants(cfg, &variants, threads)
}

pub const CONFIG_FILE: &str = "config.json";
pub const BANK_FILE: &str = "bank.bin";
pub const MODEL_FILE: &str = "model.bin";
pub const HISTORY_FILE: &str = "history.csv";

/// Creates `dir`, refusing to reuse a non-empty directory unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `config.json`, `bank.bin` (when the model has a bank), `model.bin`
/// and `history.csv` into `dir`.
pub fn save_checkpoint(dir: &Path, cfg: &RunConfig, model: &ForecastModel, history: &[EpochRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut snapshot = cfg.clone();
    snapshot.model = model.cfg.clone();
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, snapshot.to_json()).map_err(|e| Error::io(&path, e))?;
    if let Some(bank) = &model.bank {
        export_bank(bank, &model.cfg.bank, &dir.join(BANK_FILE))?;
    }
    let named: Vec<(&str, &Tensor)> = model.all_tensors().into_iter().filter(|(n, _)| !n.starts_with("bank.")).collect();
    let path = dir.join(MODEL_FILE);
    std::fs::write(&path, encode_model(&named)).map_err(|e| Error::io(&path, e))?;
    write_history(history, &dir.join(HISTORY_FILE))
}

/// Rebuilds the model stored in `dir`.
pub fn load_checkpoint(dir: &Path) -> Result<(RunConfig, ForecastModel)> {
    let path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg = RunConfig::from_json(&text)?;
    let mut model = ForecastModel::init(&cfg.model, cfg.model.bank.seed)?;
    let path = dir.join(MODEL_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let stored = decode_model(&bytes, &path)?;
    for (name, slot) in model.all_tensors_mut() {
        if name.starts_with("bank.") {
            continue;
        }
        let (_, t) = stored
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Data(format!("{} lacks tensor `{name}`", path.display())))?;
        if t.shape() != slot.shape() {
            return Err(Error::Shape {
                op: "load_checkpoint",
                shapes: vec![t.shape().to_vec(), slot.shape().to_vec()],
            });
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    if let Some(bank) = &mut model.bank {
        let loaded: PrototypeBank = import_bank(&dir.join(BANK_FILE))?;
        for (slot, t) in bank.tensors_mut().into_iter().zip(loaded.tensors()) {
            if t.shape() != slot.shape() {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    shapes: vec![t.shape().to_vec(), slot.shape().to_vec()],
                });
            }
            slot.data_mut().copy_from_slice(t.data());
        }
    }
    Ok((cfg, model))
}

pub fn load_history(dir: &Path) -> Result<Vec<EpochRecord>> {
    read_history(&dir.join(HISTORY_FILE))
}

/// One CSV row per prototype: `kind,index,v0,...`.
pub fn export_prototypes(bank: &PrototypeBank, path: &Path) -> Result<()> {
    let mut w = ::csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let wrap = |e: ::csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut header = vec!["kind".to_string(), "index".to_string()];
    header.extend((0..bank.l_p()).map(|i| format!("v{i}")));
    w.write_record(&header).map_err(wrap)?;
    for (kind, t) in [("common", &bank.s_c), ("rare", &bank.s_r)] {
        for i in 0..t.rows() {
            let mut rec = vec![kind.to_string(), i.to_string()];
            rec.extend(t.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the routing trace of every test row as JSON lines.
pub fn export_traces(model: &ForecastModel, data: &WindowDataset, batch: usize, path: &Path) -> Result<usize> {
    let (_, traces) = evaluate_traced(model, &data.test, batch, true)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for t in &traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(traces.len())
}

/// Paths of the synthetic dataset files written by [`write_synthetic`].
pub fn synthetic_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("series.csv"), dir.join("events.json"))
}

pub fn write_synthetic(cfg: &RunConfig, dir: &Path) -> Result<(PathBuf, PathBuf, usize)> {
    let mut synth = cfg.data.synth.clone();
    synth.seed = cfg.seed;
    let (frame, events) = synth_generate(&synth)?;
    let (csv, ev) = synthetic_paths(dir);
    crate::data::write_csv(&frame, &csv)?;
    crate::data::write_events(&events, &ev)?;
    Ok((csv, ev, events.len()))
}
