use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::objectives::{ActiveTerms, Aggregation, RegularizerWeights};
use crate::{Error, Result};

/// Which loss terms a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Pooled batch NMSE; gate frozen at uniform; no regularizers.
    Erm,
    /// Difficulty-weighted per-domain NMSE only; gate frozen.
    Sirm,
    /// Everything except the independence penalty.
    NoIndy,
    /// Weighted task loss, variance, independence and gate regularizers.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Erm, Variant::Sirm, Variant::NoIndy, Variant::Full];

    pub fn active_terms(self) -> ActiveTerms {
        match self {
            Variant::Erm => ActiveTerms {
                aggregation: Aggregation::Pooled,
                variance: false,
                independence: false,
                gate: false,
            },
            Variant::Sirm => ActiveTerms {
                aggregation: Aggregation::DomainWeighted,
                variance: false,
                independence: false,
                gate: false,
            },
            Variant::NoIndy => ActiveTerms {
                aggregation: Aggregation::DomainWeighted,
                variance: true,
                independence: false,
                gate: true,
            },
            Variant::Full => ActiveTerms {
                aggregation: Aggregation::DomainWeighted,
                variance: true,
                independence: true,
                gate: true,
            },
        }
    }

    pub fn default_strategy(self) -> BatchStrategy {
        match self {
            Variant::Erm => BatchStrategy::Proportional,
            _ => BatchStrategy::StratifiedEqual,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Erm => "erm",
            Variant::Sirm => "sirm",
            Variant::NoIndy => "noindy",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "erm" | "lstm" => Ok(Variant::Erm),
            "sirm" => Ok(Variant::Sirm),
            "noindy" | "no_indy" | "no-indy" => Ok(Variant::NoIndy),
            "full" | "cabernet" => Ok(Variant::Full),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// How mini-batches draw from the training domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchStrategy {
    /// Shuffle the pooled windows; domains appear in proportion to size.
    Proportional,
    /// `floor(batch / |E|)` windows from every domain in every batch.
    StratifiedEqual,
}

impl FromStr for BatchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "proportional" => Ok(BatchStrategy::Proportional),
            "stratified-equal" | "stratified" => Ok(BatchStrategy::StratifiedEqual),
            other => Err(Error::Config(format!("unknown batch strategy {other:?}"))),
        }
    }
}

/// Every knob of a training run. Serialized as TOML; missing fields take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Latent size `d`.
    pub hidden: usize,
    /// Window length `w`.
    pub window: usize,
    /// Scale-encoder hidden width.
    pub scale_hidden: usize,
    pub weights: RegularizerWeights,
    pub seed: u64,
    /// Validation cadence in epochs.
    pub eval_every: usize,
    /// Batch strategy; `None` picks the variant default.
    pub strategy: Option<BatchStrategy>,
    /// Gate trainability; `None` picks the variant default.
    pub gate_trainable: Option<bool>,
    /// Rescale difficulty weights to mean 1 across training domains.
    pub normalize_domain_weights: bool,
    pub use_scale_encoder: bool,
    /// Held-out scale summary from the training domains instead of the
    /// held-out domain's calibration prefix.
    pub zero_shot: bool,
    /// Windows per chunk when predicting without gradients.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            lr: 2e-4,
            epochs: 500,
            batch_size: 512,
            hidden: 64,
            window: crate::data::DEFAULT_WINDOW,
            scale_hidden: 16,
            weights: RegularizerWeights::default(),
            seed: 0,
            eval_every: 10,
            strategy: None,
            gate_trainable: None,
            normalize_domain_weights: false,
            use_scale_encoder: true,
            zero_shot: false,
            eval_chunk: 1024,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset used by the synthetic experiments.
    pub fn desk() -> Self {
        Self {
            hidden: 16,
            epochs: 200,
            batch_size: 128,
            lr: 5e-3,
            weights: RegularizerWeights {
                lambda_be: 0.1,
                lambda_l1: 0.0,
                lambda_var: 1.0,
                lambda_indy: 0.1,
            },
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.variant = v;
        self
    }

    pub fn strategy(&self) -> BatchStrategy {
        self.strategy.unwrap_or_else(|| self.variant.default_strategy())
    }

    pub fn gate_trainable(&self) -> bool {
        self.gate_trainable.unwrap_or(self.variant.active_terms().gate)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("window", self.window),
            ("scale_hidden", self.scale_hidden),
            ("eval_every", self.eval_every),
            ("eval_chunk", self.eval_chunk),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        self.weights.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
