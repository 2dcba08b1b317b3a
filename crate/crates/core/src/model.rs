//! Backbone plus optional prototype bank and fusion head, with a single
//! named parameter registry for the optimizer.

use serde::{Deserialize, Serialize};

use crate::backbone::{denormalize_rows, normalize_rows, BackboneVars, LinearBackbone};
use crate::bank::{BankConfig, PrototypeBank};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{stream, Stream};
use crate::routing::{forward_dpad, DpadForward, Fusion, FusionHead, Paths, RoutingConfig, RoutingTrace};

/// Which parts of the prototype machinery are attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both banks and the fusion head.
    #[default]
    Full,
    /// Backbone with its own linear head; no bank.
    NoDdp,
    CommonOnly,
    RareOnly,
}

impl Variant {
    pub fn paths(self) -> Option<Paths> {
        match self {
            Variant::Full => Some(Paths::BOTH),
            Variant::NoDdp => None,
            Variant::CommonOnly => Some(Paths {
                common: true,
                rare: false,
            }),
            Variant::RareOnly => Some(Paths {
                common: false,
                rare: true,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub horizon: usize,
    pub variant: Variant,
    pub fusion: Fusion,
    /// Odd moving-average window for a trend/seasonal encoder split.
    pub decomposition: Option<usize>,
    /// Keep every bank tensor fixed at its initial value.
    pub freeze_bank: bool,
    pub bank: BankConfig,
    pub routing: RoutingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            horizon: 96,
            variant: Variant::Full,
            fusion: Fusion::Adaptive,
            decomposition: None,
            freeze_bank: false,
            bank: BankConfig::default(),
            routing: RoutingConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be > 0".into()));
        }
        self.bank.validate()?;
        self.routing.validate(self.bank.m)
    }
}

pub struct ModelForward {
    /// `[R, H]` forecast in the instance-normalized space.
    pub y: Var,
    pub dpad: Option<DpadForward>,
    /// Tape handle of every registry parameter, by name.
    pub bindings: Vec<(&'static str, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    pub cfg: ModelConfig,
    pub backbone: LinearBackbone,
    pub bank: Option<PrototypeBank>,
    pub head: Option<FusionHead>,
}

impl ForecastModel {
    /// Builds a model from `seed`. The backbone, bank and fusion head draw
    /// from separate streams, so variants sharing a seed share encoders.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut cfg = cfg.clone();
        cfg.bank.seed = seed;
        let b = &cfg.bank;
        let backbone = LinearBackbone::init(&mut stream(seed, Stream::Backbone), b.l_p, b.d, cfg.horizon, cfg.decomposition)?;
        let (bank, head) = match cfg.variant.paths() {
            None => (None, None),
            Some(paths) => {
                let mut bank = PrototypeBank::init(b)?;
                if cfg.freeze_bank {
                    bank.tensors_mut().into_iter().for_each(|t| t.set_requires_grad(false));
                }
                let head = FusionHead::init(&mut stream(seed, Stream::Fusion), b.d, paths, cfg.horizon);
                (Some(bank), Some(head))
            }
        };
        Ok(ForecastModel {
            cfg,
            backbone,
            bank,
            head,
        })
    }

    pub fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    pub fn l_p(&self) -> usize {
        self.backbone.l_p()
    }

    fn uses(&self, name: &str) -> bool {
        let paths = self.cfg.variant.paths();
        match name {
            "backbone.base_head_weight" | "backbone.base_head_bias" => paths.is_none(),
            "bank.s_c" | "bank.proj_c_weight" | "bank.proj_c_bias" => paths.is_some_and(|p| p.common),
            "bank.s_r" | "bank.proj_r_weight" | "bank.proj_r_bias" => paths.is_some_and(|p| p.rare),
            _ => true,
        }
    }

    /// Every stored tensor, named, whether or not it is trained.
    pub fn all_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let bb = &self.backbone;
        let mut out = vec![("backbone.enc_weight", &bb.enc_weight), ("backbone.enc_bias", &bb.enc_bias)];
        if let Some(t) = &bb.trend_weight {
            out.push(("backbone.trend_weight", t));
        }
        out.push(("backbone.base_head_weight", &bb.base_head_weight));
        out.push(("backbone.base_head_bias", &bb.base_head_bias));
        if let Some(bank) = &self.bank {
            let names = BANK_NAMES;
            out.extend(names.into_iter().zip(bank.tensors()));
        }
        if let Some(head) = &self.head {
            out.push(("head.w_o", &head.w_o));
            out.push(("head.b_o", &head.b_o));
        }
        out
    }

    pub fn all_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let bb = &mut self.backbone;
        let mut out = vec![
            ("backbone.enc_weight", &mut bb.enc_weight),
            ("backbone.enc_bias", &mut bb.enc_bias),
        ];
        if let Some(t) = &mut bb.trend_weight {
            out.push(("backbone.trend_weight", t));
        }
        out.push(("backbone.base_head_weight", &mut bb.base_head_weight));
        out.push(("backbone.base_head_bias", &mut bb.base_head_bias));
        if let Some(bank) = &mut self.bank {
            out.extend(BANK_NAMES.into_iter().zip(bank.tensors_mut()));
        }
        if let Some(head) = &mut self.head {
            out.push(("head.w_o", &mut head.w_o));
            out.push(("head.b_o", &mut head.b_o));
        }
        out
    }

    /// Parameters the optimizer updates: used by this variant and not frozen.
    pub fn registry(&self) -> Vec<(&'static str, &Tensor)> {
        let keep: Vec<bool> = self.all_tensors().iter().map(|(n, t)| self.uses(n) && t.requires_grad()).collect();
        self.all_tensors().into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect()
    }

    pub fn registry_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let keep: Vec<bool> = self.all_tensors().iter().map(|(n, t)| self.uses(n) && t.requires_grad()).collect();
        self.all_tensors_mut().into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect()
    }

    /// Forward pass on `[R, L_p]` instance-normalized windows.
    pub fn forward(&self, tape: &mut Tape, x_norm: Var) -> Result<ModelForward> {
        let bb_vars: BackboneVars = self.backbone.bind(tape);
        let mut bindings = vec![("backbone.enc_weight", bb_vars.enc_weight), ("backbone.enc_bias", bb_vars.enc_bias)];
        if let Some(v) = bb_vars.trend_weight {
            bindings.push(("backbone.trend_weight", v));
        }
        let h = self.backbone.encode(tape, &bb_vars, x_norm)?;
        match (self.cfg.variant.paths(), &self.bank, &self.head) {
            (Some(paths), Some(bank), Some(head)) => {
                let bank_vars = bank.bind(tape);
                let head_vars = head.bind(tape);
                let bv = [
                    bank_vars.s_c,
                    bank_vars.s_r,
                    bank_vars.proj_c_weight,
                    bank_vars.proj_c_bias,
                    bank_vars.proj_r_weight,
                    bank_vars.proj_r_bias,
                ];
                bindings.extend(BANK_NAMES.into_iter().zip(bv));
                bindings.push(("head.w_o", head_vars.w_o));
                bindings.push(("head.b_o", head_vars.b_o));
                let out = forward_dpad(
                    tape,
                    x_norm,
                    h,
                    &bank_vars,
                    &head_vars,
                    &self.cfg.routing,
                    self.cfg.fusion,
                    paths,
                )?;
                Ok(ModelForward {
                    y: out.y,
                    dpad: Some(out),
                    bindings,
                })
            }
            (None, _, _) => {
                bindings.push(("backbone.base_head_weight", bb_vars.base_head_weight));
                bindings.push(("backbone.base_head_bias", bb_vars.base_head_bias));
                let y = self.backbone.baseline_predict(tape, &bb_vars, h)?;
                Ok(ModelForward {
                    y,
                    dpad: None,
                    bindings,
                })
            }
            _ => Err(Error::Config("model variant needs a bank and fusion head".into())),
        }
    }

    /// Forecasts raw `[R, L_p]` windows, returning `[R, H]` in the input's
    /// scale plus per-row routing traces (empty for the backbone-only variant).
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Vec<RoutingTrace>)> {
        let (xn, states) = normalize_rows(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(xn);
        let fwd = self.forward(&mut tape, xv)?;
        let y = denormalize_rows(&mut tape, fwd.y, &states)?;
        let traces = fwd.dpad.map(|d| d.traces).unwrap_or_default();
        Ok((tape.value(y).clone(), traces))
    }

    pub fn param_count(&self) -> usize {
        self.registry().iter().map(|(_, t)| t.len()).sum()
    }
}

pub const BANK_NAMES: [&str; 6] = [
    "bank.s_c",
    "bank.s_r",
    "bank.proj_c_weight",
    "bank.proj_c_bias",
    "bank.proj_r_weight",
    "bank.proj_r_bias",
];
