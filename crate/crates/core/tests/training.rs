//! Descent oracles: optimization must make measurable progress on series a
//! linear model can represent exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dpad::data::{make_windows, SeriesFrame, SplitSpec, WindowDataset};
use dpad::losses::DGLossConfig;
use dpad::model::{ForecastModel, ModelConfig, Variant};
use dpad::trainer::{evaluate, train, TrainConfig, Trainer};
use dpad::bank::BankConfig;
use dpad::routing::RoutingConfig;
use dpad::Tensor;

fn frame(t: usize, c: usize, f: impl Fn(usize, usize) -> f64) -> SeriesFrame {
    let values = (0..t).flat_map(|r| (0..c).map(move |ch| (r, ch))).map(|(r, ch)| f(r, ch)).collect();
    let names = (0..c).map(|i| format!("c{i}")).collect();
    SeriesFrame::new(Tensor::matrix(t, c, values).unwrap(), names, None).unwrap()
}

fn dataset(f: &SeriesFrame, l_p: usize, h: usize) -> WindowDataset {
    let split = SplitSpec::fractions(f.len(), 0.7, 0.2).unwrap();
    make_windows(f, split, l_p, h, 1, None).unwrap()
}

fn model(variant: Variant, l_p: usize, h: usize) -> ForecastModel {
    let cfg = ModelConfig {
        horizon: h,
        variant,
        bank: BankConfig {
            m: 8,
            n: 3,
            d: 16,
            l_p,
            ..Default::default()
        },
        routing: RoutingConfig {
            k: 3,
            ..Default::default()
        },
        ..Default::default()
    };
    ForecastModel::init(&cfg, 5).unwrap()
}

fn run_steps(model: &mut ForecastModel, data: &WindowDataset, steps: usize) {
    let train_cfg = TrainConfig::default();
    let mut trainer = Trainer::new(model, &train_cfg, &DGLossConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut order: Vec<usize> = (0..data.train.samples()).collect();
    let mut done = 0;
    while done < steps {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train_cfg.batch_size) {
            if done == steps {
                break;
            }
            let (x, y) = data.train.batch(chunk);
            trainer.step(model, &x, &y).unwrap();
            done += 1;
        }
    }
}

#[test]
fn linear_trend_train_mse_falls_below_ten_percent() {
    let f = frame(1200, 2, |t, c| 0.01 * t as f64 * (1.0 + c as f64) - 3.0);
    let data = dataset(&f, 24, 8);
    let mut m = model(Variant::Full, 24, 8);
    let before = evaluate(&m, &data.train, 256).unwrap().mse;
    run_steps(&mut m, &data, 300);
    let after = evaluate(&m, &data.train, 256).unwrap().mse;
    assert!(after < 0.1 * before, "train mse {before} -> {after}");
}

#[test]
fn ramp_backbone_improves_test_mse() {
    let f = frame(900, 1, |t, _| t as f64);
    let data = dataset(&f, 16, 4);
    let mut m = model(Variant::NoDdp, 16, 4);
    let before = evaluate(&m, &data.test, 256).unwrap().mse;
    run_steps(&mut m, &data, 200);
    let after = evaluate(&m, &data.test, 256).unwrap().mse;
    assert!(after < before, "test mse {before} -> {after}");
}

#[test]
fn one_epoch_gives_one_history_row_and_best_model_is_kept() {
    let f = frame(800, 2, |t, c| ((t as f64) / (5.0 + c as f64)).sin() + 0.001 * t as f64);
    let data = dataset(&f, 20, 6);
    let mut m = model(Variant::Full, 20, 6);
    let one = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let report = train(&mut m, &data, &one, &DGLossConfig::default(), 1).unwrap();
    assert_eq!(report.history.len(), 1);

    let mut m = model(Variant::Full, 20, 6);
    let cfg = TrainConfig {
        epochs: 6,
        patience: 2,
        ..Default::default()
    };
    let report = train(&mut m, &data, &cfg, &DGLossConfig::default(), 1).unwrap();
    let best = report.history.iter().map(|r| r.val_mse).fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_val_mse, best);
    let val = evaluate(&m, &data.val, 256).unwrap().mse;
    assert!((val - best).abs() < 1e-12, "restored model val {val} vs best {best}");
}
