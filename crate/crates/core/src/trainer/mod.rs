//! Optimization, evaluation and checkpointing.

mod adam;
mod checkpoint;
mod eval;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{decode_model, encode_model, read_history, write_history, MODEL_MAGIC};
pub use eval::{evaluate, evaluate_traced, Metrics, TraceRecord};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{denormalize_rows, normalize_rows};
use crate::data::{SplitWindows, WindowDataset};
use crate::error::{Error, Result};
use crate::losses::{
    diversity_loss, mse_loss, rarity_loss, separation_loss, total_loss, DGLossConfig, FrequencyTracker, LossTerms,
};
use crate::model::ForecastModel;
use crate::numerics::{Tape, Tensor};
use crate::rng::{stream, Stream};
use crate::routing::select_top_k;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
    /// Samples per forward pass during evaluation.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            patience: 3,
            adam: AdamConfig::default(),
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config(
                "epochs, patience, batch_size and eval_batch must all be >= 1".into(),
            ));
        }
        self.adam.validate()
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    /// Unweighted auxiliary loss means over the epoch (0 when not computed).
    pub sep: f64,
    pub rare: f64,
    pub div: f64,
    pub total: f64,
    /// Fraction of training rows that switched on a rare prototype.
    pub rare_activation_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
}

/// Per-batch loss values.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub mse: f64,
    pub sep: f64,
    pub rare: f64,
    pub div: f64,
    pub total: f64,
    pub rows: usize,
    pub rare_active: usize,
}

/// Mutable state carried across optimizer steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub adam: Adam,
    pub tracker: Option<FrequencyTracker>,
    pub loss: DGLossConfig,
}

impl Trainer {
    pub fn new(model: &ForecastModel, train: &TrainConfig, loss: &DGLossConfig) -> Self {
        let common = model.cfg.variant.paths().is_some_and(|p| p.common);
        Trainer {
            adam: Adam::new(train.adam.clone()),
            tracker: common.then(|| FrequencyTracker::new(model.cfg.bank.m, loss.freq_ema)),
            loss: loss.clone(),
        }
    }

    /// Forward, loss, backward and one Adam update on raw `[R, L_p]` inputs
    /// and `[R, H]` targets.
    pub fn step(&mut self, model: &mut ForecastModel, x: &Tensor, y: &Tensor) -> Result<StepStats> {
        let obj = objective(model, self.tracker.as_ref(), &self.loss, x, y)?;
        for (name, p) in model.registry_mut() {
            match obj.grads.iter().find(|(n, _)| *n == name) {
                Some((_, g)) => p.set_grad(g.clone())?,
                None => p.zero_grad(),
            }
        }
        self.adam.step(model.registry_mut())?;
        if let Some(tracker) = &mut self.tracker {
            tracker.update(&obj.top1);
        }
        Ok(obj.stats)
    }
}

/// Loss values and registry gradients of one batch.
#[derive(Debug, Clone)]
pub struct Objective {
    pub stats: StepStats,
    /// Gradient of the total loss for every registry parameter.
    pub grads: Vec<(&'static str, Vec<f64>)>,
    /// Top-1 common prototype per row (empty without the common path).
    pub top1: Vec<usize>,
}

/// Evaluates the training objective `mse + sum(lambda * aux)` on raw inputs
/// and targets, with frequency weights read from `tracker`.
pub fn objective(
    model: &ForecastModel,
    tracker: Option<&FrequencyTracker>,
    cfg: &DGLossConfig,
    x: &Tensor,
    y: &Tensor,
) -> Result<Objective> {
    let (xn, states) = normalize_rows(x)?;
    let mut tape = Tape::new();
    let xv = tape.constant(xn);
    let fwd = model.forward(&mut tape, xv)?;
    let pred = denormalize_rows(&mut tape, fwd.y, &states)?;
    let yv = tape.constant(y.clone());
    let mse = mse_loss(&mut tape, pred, yv)?;
    let mut terms = LossTerms {
        mse,
        sep: None,
        rare: None,
        div: None,
    };
    let rows = x.rows();
    let mut top1 = Vec::new();
    let mut rare_active = 0;
    if let Some(d) = &fwd.dpad {
        let activated: Vec<(usize, usize)> =
            d.traces.iter().enumerate().filter_map(|(r, t)| t.i_r.map(|j| (r, j))).collect();
        rare_active = activated.len();
        if let Some(rho_c) = d.rho_c {
            top1 = (0..rows).map(|r| select_top_k(tape.value(rho_c).row(r), 1)[0]).collect();
        }
        if let (Some(rho_c), Some(rho_r), Some(tracker)) = (d.rho_c, d.rho_r, tracker) {
            if cfg.lambda_sep != 0.0 {
                let arg_c: Vec<Vec<usize>> = top1.iter().map(|&i| vec![i]).collect();
                let arg_r: Vec<Vec<usize>> = (0..rows).map(|r| select_top_k(tape.value(rho_r).row(r), 1)).collect();
                let best_c = tape.gather_cols(rho_c, &arg_c)?;
                let best_r = tape.gather_cols(rho_r, &arg_r)?;
                let delta = tape.sub(best_c, best_r)?;
                let omega: Vec<f64> = top1.iter().map(|&i| tracker.frequency_weight(i)).collect();
                terms.sep = Some(separation_loss(&mut tape, delta, &omega, cfg.margin)?);
            }
        }
        if let Some(rho_r) = d.rho_r {
            if cfg.lambda_rare != 0.0 {
                terms.rare = Some(rarity_loss(&mut tape, rho_r, &activated, cfg.tau_rare)?);
            }
        }
        if let Some(p_c) = d.p_c {
            if cfg.lambda_div != 0.0 {
                terms.div = Some(diversity_loss(&mut tape, p_c)?);
            }
        }
    }
    let total = total_loss(&mut tape, &terms, cfg)?;
    let val = |v: Option<crate::numerics::Var>| v.map(|v| tape.value(v).item()).unwrap_or(0.0);
    let stats = StepStats {
        mse: tape.value(mse).item(),
        sep: val(terms.sep),
        rare: val(terms.rare),
        div: val(terms.div),
        total: tape.value(total).item(),
        rows,
        rare_active,
    };
    if !stats.total.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            batch: 0,
            components: format!(
                "mse={} sep={} rare={} div={} total={}",
                stats.mse, stats.sep, stats.rare, stats.div, stats.total
            ),
        });
    }
    let g = tape.backward(total)?;
    let grads = model
        .registry()
        .into_iter()
        .filter_map(|(name, p)| {
            fwd.bindings
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, var)| (name, g.get_or_zeros(*var, p.len())))
        })
        .collect();
    Ok(Objective { stats, grads, top1 })
}

fn with_position(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Diverged { components, .. } => Error::Diverged {
            epoch,
            batch,
            components,
        },
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            batch,
            components: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains with early stopping on validation MSE. On return `model` holds the
/// parameters of the best validation epoch.
pub fn train(
    model: &mut ForecastModel,
    data: &WindowDataset,
    cfg: &TrainConfig,
    loss: &DGLossConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    loss.validate()?;
    check_dataset(model, &data.train)?;
    let mut trainer = Trainer::new(model, cfg, loss);
    let mut rng = stream(seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..data.train.samples()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let (mut rows, mut active) = (0usize, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.train.batch(chunk);
            let s = trainer.step(model, &x, &y).map_err(|e| with_position(e, epoch, b))?;
            let w = s.rows as f64;
            for (acc, v) in sums.iter_mut().zip([s.mse, s.sep, s.rare, s.div, s.total]) {
                *acc += v * w;
            }
            rows += s.rows;
            active += s.rare_active;
        }
        let val = evaluate(model, &data.val, cfg.eval_batch)?;
        let n = rows as f64;
        let rec = EpochRecord {
            epoch,
            train_mse: sums[0] / n,
            val_mse: val.mse,
            sep: sums[1] / n,
            rare: sums[2] / n,
            div: sums[3] / n,
            total: sums[4] / n,
            rare_activation_rate: active as f64 / n,
        };
        log::info!(
            "epoch {epoch}: train_mse={:.5} val_mse={:.5} total={:.5} rare_rate={:.3}",
            rec.train_mse,
            rec.val_mse,
            rec.total,
            rec.rare_activation_rate
        );
        history.push(rec);
        if val.mse < best.0 {
            best = (val.mse, epoch, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    let (best_val_mse, best_epoch, best_model) = best;
    *model = best_model;
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_mse,
        stopped_early,
    })
}

fn check_dataset(model: &ForecastModel, split: &SplitWindows) -> Result<()> {
    if split.l_p != model.l_p() || split.horizon != model.horizon() {
        return Err(Error::Config(format!(
            "dataset windows are ({}, {}) but the model expects L_p={} H={}",
            split.l_p,
            split.horizon,
            model.l_p(),
            model.horizon()
        )));
    }
    if split.samples() == 0 {
        return Err(Error::Data("training split has no samples".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::BankConfig;
    use crate::data::{make_windows, synth_generate, SplitSpec, SynthConfig};
    use crate::model::{ModelConfig, Variant};
    use crate::routing::RoutingConfig;

    fn small_model(variant: Variant) -> ModelConfig {
        ModelConfig {
            horizon: 8,
            variant,
            bank: BankConfig {
                m: 8,
                n: 4,
                d: 16,
                l_p: 24,
                ..Default::default()
            },
            routing: RoutingConfig {
                k: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn small_data() -> WindowDataset {
        let (frame, events) = synth_generate(&SynthConfig {
            t: 600,
            c: 2,
            event_rate: 20.0,
            ..Default::default()
        })
        .unwrap();
        let split = SplitSpec::fractions(600, 0.6, 0.2).unwrap();
        make_windows(&frame, split, 24, 8, 1, Some(&events)).unwrap()
    }

    #[test]
    fn single_epoch_history() {
        let data = small_data();
        let mut model = ForecastModel::init(&small_model(Variant::Full), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let report = train(&mut model, &data, &cfg, &DGLossConfig::default(), 0).unwrap();
        assert_eq!(report.history.len(), 1);
        let rec = &report.history[0];
        assert!(rec.sep > 0.0 || rec.div > 0.0);
        assert!(rec.total >= rec.train_mse);
    }

    #[test]
    fn best_epoch_is_restored() {
        let data = small_data();
        let mut model = ForecastModel::init(&small_model(Variant::Full), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            patience: 2,
            ..Default::default()
        };
        let report = train(&mut model, &data, &cfg, &DGLossConfig::default(), 1).unwrap();
        let best = report.history.iter().map(|r| r.val_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_val_mse, best);
        let now = evaluate(&model, &data.val, 256).unwrap().mse;
        assert_eq!(now, best);
    }

    #[test]
    fn mismatched_window_length_is_rejected() {
        let data = small_data();
        let mut cfg = small_model(Variant::NoDdp);
        cfg.bank.l_p = 12;
        let mut model = ForecastModel::init(&cfg, 0).unwrap();
        assert!(train(&mut model, &data, &TrainConfig::default(), &DGLossConfig::default(), 0).is_err());
    }

    #[test]
    fn non_finite_input_aborts_with_position() {
        let mut model = ForecastModel::init(&small_model(Variant::NoDdp), 0).unwrap();
        model.backbone.enc_weight.data_mut()[0] = f64::MAX;
        model.backbone.enc_weight.data_mut()[1] = f64::MAX;
        let data = small_data();
        let err = train(&mut model, &data, &TrainConfig::default(), &DGLossConfig::default(), 0).unwrap_err();
        assert!(err.is_numerical(), "{err}");
        assert!(matches!(err, Error::Diverged { epoch: 1, batch: 0, .. }), "{err}");
    }
}
