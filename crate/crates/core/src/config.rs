//! Top-level run configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::losses::DGLossConfig;
use crate::model::{ModelConfig, Variant};
use crate::routing::Fusion;
use crate::trainer::TrainConfig;

/// How rows are divided into train/validation/test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitChoice {
    /// `floor(train * T)` train rows, `floor(test * T)` test rows.
    Fractions { train: f64, test: f64 },
    /// 12/4/4 months of hourly rows.
    EttHourly,
    Borders { train_end: usize, val_end: usize },
}

impl Default for SplitChoice {
    fn default() -> Self {
        SplitChoice::Fractions { train: 0.7, test: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV input. Without it a synthetic series is generated.
    pub csv: Option<PathBuf>,
    /// Channels to keep from the CSV (all numeric columns by default).
    pub targets: Option<Vec<String>>,
    /// Event log for CSV input, enabling the rare-event metric.
    pub events: Option<PathBuf>,
    pub split: SplitChoice,
    pub stride: usize,
    /// Generator settings; its seed is taken from the run seed.
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            csv: None,
            targets: None,
            events: None,
            split: SplitChoice::default(),
            stride: 1,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation and every model stream.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Seeds `seed, seed + 1, ...` used by the comparison.
    pub repetitions: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: DGLossConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            repetitions: 3,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: DGLossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.data.csv.is_none() {
            self.data.synth.validate()?;
            let need = self.model.bank.l_p + self.model.horizon;
            if self.data.synth.t < 3 * need {
                return Err(Error::Config(format!(
                    "synthetic T={} is too short for L_p + H = {need} in every split",
                    self.data.synth.t
                )));
            }
        }
        if self.data.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if let SplitChoice::Fractions { train, test } = self.data.split {
            if !(train > 0.0 && test > 0.0 && train + test < 1.0) {
                return Err(Error::Config(format!("split fractions train={train} test={test} are invalid")));
            }
        }
        Ok(())
    }

    pub fn with_ablation(&self, ablation: Ablation) -> RunConfig {
        let mut cfg = self.clone();
        ablation.apply(&mut cfg.model);
        cfg
    }
}

/// A named model modification used by the ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoDdp,
    CommonOnly,
    RareOnly,
    Fusion(Fusion),
}

impl Ablation {
    pub const STUDY: [Ablation; 5] = [
        Ablation::NoDdp,
        Ablation::CommonOnly,
        Ablation::RareOnly,
        Ablation::Fusion(Fusion::Mean),
        Ablation::Fusion(Fusion::Additive),
    ];

    pub fn apply(self, model: &mut ModelConfig) {
        match self {
            Ablation::Full => model.variant = Variant::Full,
            Ablation::NoDdp => model.variant = Variant::NoDdp,
            Ablation::CommonOnly => model.variant = Variant::CommonOnly,
            Ablation::RareOnly => model.variant = Variant::RareOnly,
            Ablation::Fusion(f) => model.fusion = f,
        }
    }

    /// Human-readable variant name.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "dpad",
            Ablation::NoDdp => "backbone-only",
            Ablation::CommonOnly => "common-only",
            Ablation::RareOnly => "rare-only",
            Ablation::Fusion(Fusion::Adaptive) => "fusion=adaptive",
            Ablation::Fusion(Fusion::Mean) => "fusion=mean",
            Ablation::Fusion(Fusion::Additive) => "fusion=additive",
        }
    }
}

/// Label for a model configuration, as reported in run summaries.
pub fn variant_label(model: &ModelConfig) -> String {
    match model.variant {
        Variant::NoDdp => "backbone-only".into(),
        Variant::CommonOnly => "common-only".into(),
        Variant::RareOnly => "rare-only".into(),
        Variant::Full => match model.fusion {
            Fusion::Adaptive => "dpad".into(),
            Fusion::Mean => "fusion=mean".into(),
            Fusion::Additive => "fusion=additive".into(),
        },
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Ablation::Full => "full",
            Ablation::NoDdp => "no_ddp",
            Ablation::CommonOnly => "common_only",
            Ablation::RareOnly => "rare_only",
            Ablation::Fusion(Fusion::Adaptive) => "fusion=adaptive",
            Ablation::Fusion(Fusion::Mean) => "fusion=mean",
            Ablation::Fusion(Fusion::Additive) => "fusion=additive",
        };
        f.write_str(s)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Ablation::Full,
            "no_ddp" => Ablation::NoDdp,
            "common_only" => Ablation::CommonOnly,
            "rare_only" => Ablation::RareOnly,
            "fusion=adaptive" => Ablation::Fusion(Fusion::Adaptive),
            "fusion=mean" => Ablation::Fusion(Fusion::Mean),
            "fusion=additive" => Ablation::Fusion(Fusion::Additive),
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}` (expected full, no_ddp, common_only, rare_only, fusion=adaptive|mean|additive)"
                )))
            }
        })
    }
}
