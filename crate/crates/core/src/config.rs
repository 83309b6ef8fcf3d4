//! Experiment configuration, read from and written to TOML.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::StrategyKind;
use crate::data::ScenarioSpec;
use crate::error::{config, Error, Result};
use crate::nn::{Architecture, DEFAULT_FEATURE_LAYERS};
use crate::seeds::SeedBundle;

/// Training method: the selective-aggregation method or one of the baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Per-class head aggregation over the clients holding each class.
    Surgical,
    /// FedAvg with full-width heads; missing classes labeled negative.
    VanillaFl,
    /// FedAvg with full-width heads; loss restricted to local classes.
    FlPartialLoss,
    /// Feature extractor aggregated, heads kept personal.
    Pfl,
    /// One model on the concatenated data, missing classes labeled negative.
    Centralized,
    /// One standalone model per client.
    Individual,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Surgical,
        Method::VanillaFl,
        Method::FlPartialLoss,
        Method::Pfl,
        Method::Centralized,
        Method::Individual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Surgical => "surgical",
            Method::VanillaFl => "vanilla_fl",
            Method::FlPartialLoss => "fl_partial_loss",
            Method::Pfl => "pfl",
            Method::Centralized => "centralized",
            Method::Individual => "individual",
        }
    }

    pub fn is_federated(self) -> bool {
        matches!(
            self,
            Method::Surgical | Method::VanillaFl | Method::FlPartialLoss | Method::Pfl
        )
    }

    /// Whether a single model covering all classes comes out of training.
    pub fn has_global_model(self, strategy: StrategyKind) -> bool {
        match self {
            Method::Centralized => true,
            Method::Surgical | Method::VanillaFl | Method::FlPartialLoss => strategy != StrategyKind::FedBn,
            Method::Pfl | Method::Individual => false,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

fn default_strategy() -> StrategyKind {
    StrategyKind::FedAvg
}

fn default_total_epochs() -> usize {
    100
}

fn default_epochs_per_round() -> usize {
    1
}

fn default_warmup_epochs() -> usize {
    5
}

fn default_lr() -> f64 {
    1e-2
}

fn default_batch_size() -> usize {
    32
}

fn default_feature_layers() -> Vec<String> {
    DEFAULT_FEATURE_LAYERS.iter().map(|s| s.to_string()).collect()
}

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default = "default_strategy")]
    pub strategy: StrategyKind,
    /// Total local epochs per client.
    #[serde(rename = "T", default = "default_total_epochs")]
    pub total_epochs: usize,
    /// Local epochs between aggregations.
    #[serde(rename = "E", default = "default_epochs_per_round")]
    pub epochs_per_round: usize,
    /// Head-only epochs before round 1.
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "default_lr")]
    pub warmup_lr: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Weight client contributions by training-set size.
    #[serde(default)]
    pub sample_weighted: bool,
    #[serde(default = "default_feature_layers")]
    pub feature_layers: Vec<String>,
    #[serde(default)]
    pub seeds: SeedBundle,
    pub scenario: ScenarioSpec,
}

impl ExperimentConfig {
    /// Config with default hyperparameters for `method` on `scenario`.
    pub fn new(method: Method, scenario: ScenarioSpec) -> Self {
        Self {
            method,
            strategy: default_strategy(),
            total_epochs: default_total_epochs(),
            epochs_per_round: default_epochs_per_round(),
            warmup_epochs: default_warmup_epochs(),
            warmup_lr: default_lr(),
            lr: default_lr(),
            batch_size: default_batch_size(),
            sample_weighted: false,
            feature_layers: default_feature_layers(),
            seeds: SeedBundle::from_base(scenario.seed),
            scenario,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        Self::from_table(table)
    }

    /// Parses and validates a TOML table. Without a `seeds` table the
    /// training seeds follow the scenario seed.
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let has_seeds = table.contains_key("seeds");
        let mut cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if !has_seeds {
            cfg.seeds = SeedBundle::from_base(cfg.scenario.seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces the scenario seed and every training seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scenario.seed = seed;
        self.seeds = SeedBundle::from_base(seed);
        self
    }

    /// Number of communication rounds, `floor(T / E)`.
    pub fn rounds(&self) -> usize {
        self.total_epochs / self.epochs_per_round.max(1)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::from_descriptors(self.scenario.d, &self.feature_layers)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.epochs_per_round == 0 {
            return config("E must be >= 1");
        }
        if self.total_epochs < self.epochs_per_round {
            return config(format!(
                "T = {} must be >= E = {}",
                self.total_epochs, self.epochs_per_round
            ));
        }
        if self.batch_size == 0 {
            return config("batch_size must be >= 1");
        }
        for (name, v) in [("lr", self.lr), ("warmup_lr", self.warmup_lr)] {
            if v < 0.0 || !v.is_finite() {
                return config(format!("{name} must be finite and >= 0"));
            }
        }
        if self.strategy == StrategyKind::FedBn
            && matches!(self.method, Method::Surgical | Method::VanillaFl | Method::FlPartialLoss)
        {
            return config(format!(
                "strategy fedbn keeps no global model and is only valid for pfl, not {}",
                self.method
            ));
        }
        self.architecture().map(|_| ())
    }
}
