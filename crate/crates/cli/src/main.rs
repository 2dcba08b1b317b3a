use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use dpad::config::{variant_label, Ablation, RunConfig};
use dpad::experiment::{
    ablation_study, compare, export_prototypes, export_traces, load_checkpoint, load_data, prepare_dir, run_on,
    save_checkpoint, thread_budget, write_synthetic,
};
use dpad::trainer::evaluate;
use dpad::Error;

#[derive(Parser, Debug)]
#[command(name = "dpad", version, about = "Dual-prototype forecasting experiments")]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model modification: full, no_ddp, common_only, rare_only,
    /// fusion=adaptive|mean|additive.
    #[arg(long, global = true)]
    ablation: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic series (series.csv) and its event log (events.json).
    Synth,
    /// Train one model and save a checkpoint.
    Train,
    /// Evaluate a saved checkpoint on its test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Backbone-only versus prototype model over several seeds.
    Compare {
        /// Also run the ablation variants and write ablation.json.
        #[arg(long)]
        ablations: bool,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Export prototypes (CSV) or test-split routing traces (JSON lines).
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        what: ExportKind,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ExportKind {
    Prototypes,
    Traces,
}

fn read_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = cli.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(a) = &cli.ablation {
        cfg = cfg.with_ablation(a.parse::<Ablation>()?);
    }
    if let Command::Compare {
        repetitions: Some(r), ..
    } = cli.command
    {
        cfg.repetitions = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn require_checkpoint(dir: &Path) -> Result<(), Error> {
    if !dir.join("config.json").is_file() {
        return Err(Error::Config(format!("{} is not a checkpoint directory", dir.display())));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = read_config(cli)?;
    if cli.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    match &cli.command {
        Command::Synth => {
            prepare_dir(&cfg.out_dir, cli.force)?;
            let (csv, events, count) = write_synthetic(&cfg, &cfg.out_dir)?;
            println!("{}", json!({"csv": csv, "events": events, "event_count": count}));
        }
        Command::Train => {
            prepare_dir(&cfg.out_dir, cli.force)?;
            let data = load_data(&cfg, cfg.seed)?;
            let out = run_on(&cfg, &data.dataset, cfg.seed)?;
            save_checkpoint(&cfg.out_dir, &cfg, &out.model, &out.report.history)?;
            println!(
                "{}",
                json!({
                    "variant": out.label,
                    "test_mse": out.test.mse,
                    "test_mae": out.test.mae,
                    "rare_event_mse": out.test.rare_event_mse,
                    "val_mse": out.val.mse,
                    "epochs": out.report.history.len(),
                    "best_epoch": out.report.best_epoch,
                    "seconds": out.seconds,
                    "checkpoint": cfg.out_dir,
                })
            );
        }
        Command::Eval { checkpoint } => {
            require_checkpoint(checkpoint)?;
            let (saved, model) = load_checkpoint(checkpoint)?;
            let data = load_data(&saved, saved.seed)?;
            let m = evaluate(&model, &data.dataset.test, saved.train.eval_batch)?;
            println!(
                "{}",
                json!({
                    "variant": variant_label(&model.cfg),
                    "test_mse": m.mse,
                    "test_mae": m.mae,
                    "rare_event_mse": m.rare_event_mse,
                    "per_horizon": m.per_horizon,
                })
            );
        }
        Command::Compare { ablations, .. } => {
            prepare_dir(&cfg.out_dir, cli.force)?;
            let threads = thread_budget();
            let report = compare(&cfg, threads)?;
            let value = serde_json::to_value(&report)?;
            write_json(&cfg.out_dir.join("comparison.json"), &value)?;
            println!(
                "{}",
                json!({
                    "baseline_mse": report.baseline.mean_mse,
                    "dpad_mse": report.dpad.mean_mse,
                    "improvement_mse": report.improvement_mse,
                    "improvement_rare_event_mse": report.improvement_rare_event_mse,
                    "seconds": report.seconds,
                })
            );
            if *ablations {
                let study = ablation_study(&cfg, threads)?;
                write_json(&cfg.out_dir.join("ablation.json"), &serde_json::to_value(&study)?)?;
                for v in &study {
                    println!("{}", json!({"variant": v.label, "mean_mse": v.mean_mse, "std_mse": v.std_mse}));
                }
            }
        }
        Command::Export { checkpoint, what } => {
            require_checkpoint(checkpoint)?;
            let (saved, model) = load_checkpoint(checkpoint)?;
            let dir = cli.out.clone().unwrap_or_else(|| checkpoint.clone());
            std::fs::create_dir_all(&dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
            match what {
                ExportKind::Prototypes => {
                    let bank = model
                        .bank
                        .as_ref()
                        .ok_or_else(|| Error::Config("backbone-only checkpoint has no prototypes".into()))?;
                    let path = dir.join("prototypes.csv");
                    export_prototypes(bank, &path)?;
                    println!("{}", json!({"prototypes": path, "rows": bank.m() + bank.n()}));
                }
                ExportKind::Traces => {
                    let data = load_data(&saved, saved.seed)?;
                    let path = dir.join("traces.jsonl");
                    let n = export_traces(&model, &data.dataset, saved.train.eval_batch, &path)?;
                    println!("{}", json!({"traces": path, "rows": n}));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
