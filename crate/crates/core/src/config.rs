//! Model hyperparameters and ablation switches.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Switches that disable one component of the block each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Accident ids are replaced by the "no incident" id.
    NoAccident,
    /// Regulation ids are replaced by the "no incident" id.
    NoRegulation,
    /// Residual modulation frozen at `α = 1`.
    NoAlpha,
    /// GLN shift frozen at `β = 0`.
    NoBeta,
    /// GLN scale frozen at `γ = 1`.
    NoGamma,
    NoSpatial,
    NoTemporal,
    /// Standard LayerNorm with static learnable affine instead of GLN.
    PlainLn,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::NoAccident,
        Ablation::NoRegulation,
        Ablation::NoAlpha,
        Ablation::NoBeta,
        Ablation::NoGamma,
        Ablation::NoSpatial,
        Ablation::NoTemporal,
        Ablation::PlainLn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoAccident => "no-accident",
            Ablation::NoRegulation => "no-regulation",
            Ablation::NoAlpha => "no-alpha",
            Ablation::NoBeta => "no-beta",
            Ablation::NoGamma => "no-gamma",
            Ablation::NoSpatial => "no-spatial",
            Ablation::NoTemporal => "no-temporal",
            Ablation::PlainLn => "plain-ln",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

/// User-facing model knobs. Dataset-dependent sizes live in [`ConFormerConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    /// Input window length T.
    pub t_in: usize,
    /// Forecast horizon T′.
    pub t_out: usize,
    pub d_in: usize,
    pub d_data: usize,
    pub d_acc: usize,
    pub d_reg: usize,
    pub d_dow: usize,
    pub d_tod: usize,
    pub d_stae: usize,
    pub d_model: usize,
    /// Graph propagation order K.
    pub hops: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub eps: f64,
    pub self_loops: bool,
    /// Fit z-score statistics per node instead of one global pair.
    pub per_node_norm: bool,
    pub ablations: Vec<Ablation>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            t_in: 12,
            t_out: 12,
            d_in: 1,
            d_data: 16,
            d_acc: 8,
            d_reg: 8,
            d_dow: 8,
            d_tod: 8,
            d_stae: 16,
            d_model: 32,
            hops: 2,
            n_heads: 4,
            n_layers: 1,
            dropout: 0.1,
            eps: 1e-5,
            self_loops: true,
            per_node_norm: false,
            ablations: Vec::new(),
        }
    }
}

impl ModelSettings {
    pub fn ablated(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn add_ablation(&mut self, a: Ablation) {
        if !self.ablations.contains(&a) {
            self.ablations.push(a);
            self.ablations.sort();
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the concatenated embedding fed to the fusion MLP.
    pub fn embed_width(&self) -> usize {
        self.d_data + self.d_acc + self.d_reg + self.d_dow + self.d_tod + self.d_stae
    }

    /// Feature width of the condition representation, `(K+1)·D_model`.
    pub fn cond_width(&self) -> usize {
        (self.hops + 1) * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_in", self.t_in),
            ("t_out", self.t_out),
            ("d_in", self.d_in),
            ("d_data", self.d_data),
            ("d_acc", self.d_acc),
            ("d_reg", self.d_reg),
            ("d_dow", self.d_dow),
            ("d_tod", self.d_tod),
            ("d_stae", self.d_stae),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Complete model shape: user settings plus the sizes fixed by the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConFormerConfig {
    pub model: ModelSettings,
    pub n_nodes: usize,
    pub steps_per_day: usize,
    pub acc_vocab: usize,
    pub reg_vocab: usize,
}

impl ConFormerConfig {
    pub fn new(
        model: ModelSettings,
        n_nodes: usize,
        steps_per_day: usize,
        acc_vocab: usize,
        reg_vocab: usize,
    ) -> Result<Self> {
        let cfg = Self {
            model,
            n_nodes,
            steps_per_day,
            acc_vocab,
            reg_vocab,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n_nodes == 0 || self.steps_per_day == 0 {
            return Err(Error::Config("n_nodes and steps_per_day must be >= 1".into()));
        }
        if self.acc_vocab == 0 || self.reg_vocab == 0 {
            return Err(Error::Config("incident vocabularies must include id 0".into()));
        }
        Ok(())
    }
}
