//! Experiment configuration, read from a sectioned TOML file.
//!
//! ```toml
//! [run]
//! id = "blobs-tiny"
//! seed = 7
//! out_dir = "runs"
//!
//! [data]
//! spec = "blobs:n=1250,classes=2,seed=3"
//!
//! [model]
//! hidden = [1, 1]
//! activation = "selu"
//! loss = "cross_entropy"
//!
//! [growth]
//! grower = "completed_tiny"
//! target_widths = [8, 8]
//!
//! [train]
//! lr = 0.05
//! ```
//!
//! Every key except `data.spec` has a default.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::growth::{AmplitudeConfig, Distribution, GrowthSchedule, Interval, Method, NormalizationMode, Scaling};
use crate::net::{Activation, Loss};

use super::data::DataSpec;
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grower {
    Tiny,
    CompletedTiny,
    GradMax,
    Random,
}

impl Grower {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tiny" => Some(Grower::Tiny),
            "completed_tiny" => Some(Grower::CompletedTiny),
            "gradmax" => Some(Grower::GradMax),
            "random" => Some(Grower::Random),
            _ => None,
        }
    }

    pub fn method(&self) -> Method {
        match self {
            Grower::Tiny | Grower::CompletedTiny => Method::Tiny,
            Grower::GradMax => Method::GradMax,
            Grower::Random => Method::Random,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Grower::Tiny => "tiny",
            Grower::CompletedTiny => "completed_tiny",
            Grower::GradMax => "gradmax",
            Grower::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawRun {
    id: Option<String>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    spec: String,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawModel {
    hidden: Option<Vec<usize>>,
    activation: Option<String>,
    loss: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawGrowth {
    grower: Option<String>,
    normalization: Option<String>,
    delta_t: Option<usize>,
    neurons_per_depth: Option<Vec<usize>>,
    bound: Option<f64>,
    interval: Option<String>,
    scaling: Option<String>,
    amplitude_search: Option<bool>,
    best_update: Option<bool>,
    refit: Option<bool>,
    max_additions: Option<usize>,
    target_widths: Option<Vec<usize>>,
    stop_loss: Option<f64>,
    estimation_coeff: Option<f64>,
    amplitude_batch: Option<usize>,
    random_distribution: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    lr: Option<f64>,
    batch: Option<usize>,
    final_epochs: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    run: RawRun,
    data: RawData,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    growth: RawGrowth,
    #[serde(default)]
    train: RawTrain,
}

/// Validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: DataSpec,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
    pub grower: Grower,
    pub normalization: NormalizationMode,
    pub schedule: GrowthSchedule,
    /// Neurons per growth event, indexed by growable position (last entry
    /// repeats).
    pub neurons_per_depth: Vec<usize>,
    pub amplitude: AmplitudeConfig,
    /// Run the amplitude line search; otherwise neurons are inserted with
    /// amplitude 1.
    pub amplitude_search: bool,
    pub best_update: bool,
    /// Score each amplitude after re-solving the next layer's best update.
    pub refit: bool,
    pub stop_loss: Option<f64>,
    pub amplitude_batch: usize,
    pub random_distribution: Distribution,
    pub lr: f64,
    pub final_epochs: usize,
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

fn parse_with<T>(v: Option<String>, default: T, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<T, HarnessError> {
    match v {
        None => Ok(default),
        Some(s) => f(&s).ok_or_else(|| bad(format!("unknown {what} {s:?}"))),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        let grower = parse_with(raw.growth.grower, Grower::CompletedTiny, "grower", Grower::parse)?;
        let default_norm = match grower {
            Grower::Tiny | Grower::CompletedTiny => NormalizationMode::TinySqrt,
            Grower::GradMax => NormalizationMode::GradMaxSqrt,
            Grower::Random => NormalizationMode::UnitThenGamma,
        };
        let d = GrowthSchedule::default();
        let cfg = ExperimentConfig {
            run_id: raw.run.id.unwrap_or_else(|| "run".into()),
            seed: raw.run.seed.unwrap_or(0),
            out_dir: raw.run.out_dir,
            data: DataSpec::parse(&raw.data.spec).map_err(|e| bad(e.to_string()))?,
            hidden: raw.model.hidden.unwrap_or_else(|| vec![1]),
            activation: parse_with(raw.model.activation, Activation::Selu, "activation", Activation::parse)?,
            loss: parse_with(raw.model.loss, Loss::Square, "loss", Loss::parse)?,
            grower,
            normalization: parse_with(raw.growth.normalization, default_norm, "normalization", NormalizationMode::parse)?,
            schedule: GrowthSchedule {
                epochs_between: raw.growth.delta_t.unwrap_or(d.epochs_between),
                max_additions: raw.growth.max_additions.unwrap_or(d.max_additions),
                target_widths: raw.growth.target_widths.unwrap_or_default(),
                initial_batch: raw.train.batch.unwrap_or(d.initial_batch),
                estimation_coeff: raw.growth.estimation_coeff.unwrap_or(d.estimation_coeff),
            },
            neurons_per_depth: raw.growth.neurons_per_depth.unwrap_or_else(|| vec![1]),
            amplitude: AmplitudeConfig {
                bound: raw.growth.bound.unwrap_or(AmplitudeConfig::default().bound),
                interval: parse_with(raw.growth.interval, Interval::Symmetric, "interval", |s| match s {
                    "symmetric" => Some(Interval::Symmetric),
                    "positive" => Some(Interval::Positive),
                    _ => None,
                })?,
                scaling: parse_with(raw.growth.scaling, Scaling::Sqrt, "scaling", Scaling::parse)?,
            },
            amplitude_search: raw.growth.amplitude_search.unwrap_or(true),
            best_update: raw.growth.best_update.unwrap_or(true),
            refit: raw.growth.refit.unwrap_or(false),
            stop_loss: raw.growth.stop_loss,
            amplitude_batch: raw.growth.amplitude_batch.unwrap_or(1000),
            random_distribution: parse_with(raw.growth.random_distribution, Distribution::Gaussian, "distribution", Distribution::parse)?,
            lr: raw.train.lr.unwrap_or(0.05),
            final_epochs: raw.train.final_epochs.unwrap_or(0),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(bad("model.hidden needs at least one layer and positive widths"));
        }
        if self.schedule.epochs_between == 0 {
            return Err(bad("growth.delta_t must be positive"));
        }
        if self.neurons_per_depth.is_empty() || self.neurons_per_depth.contains(&0) {
            return Err(bad("growth.neurons_per_depth entries must be positive"));
        }
        if self.schedule.initial_batch == 0 || self.amplitude_batch == 0 {
            return Err(bad("batch sizes must be positive"));
        }
        if !(self.amplitude.bound > 0.0) || !self.amplitude.bound.is_finite() {
            return Err(bad("growth.bound must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(bad("train.lr must be finite and non-negative"));
        }
        if !(self.schedule.estimation_coeff >= 0.0) {
            return Err(bad("growth.estimation_coeff must be non-negative"));
        }
        if !self.schedule.target_widths.is_empty() && self.schedule.target_widths.len() != self.hidden.len() {
            return Err(bad("growth.target_widths needs one entry per hidden layer"));
        }
        let gradmax_mode = matches!(self.normalization, NormalizationMode::GradMaxLinear | NormalizationMode::GradMaxSqrt);
        match self.grower {
            Grower::GradMax if !gradmax_mode && self.normalization != NormalizationMode::Unscaled => {
                Err(bad(format!("gradmax grower needs a gradmax normalization, got {}", self.normalization.name())))
            }
            Grower::Tiny | Grower::CompletedTiny | Grower::Random if gradmax_mode => {
                Err(bad(format!("normalization {} is only valid with the gradmax grower", self.normalization.name())))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml("[data]\nspec = \"regression:n=4\"\n").unwrap();
        assert_eq!(c.grower, Grower::CompletedTiny);
        assert_eq!(c.normalization, NormalizationMode::TinySqrt);
        assert_eq!(c.schedule.initial_batch, 32);
        assert_eq!(c.amplitude.bound, 4.0);
    }

    #[test]
    fn invalid_combinations_rejected() {
        let gm = "[data]\nspec = \"regression\"\n[growth]\ngrower = \"tiny\"\nnormalization = \"gradmax_linear\"\n";
        assert!(ExperimentConfig::from_toml(gm).is_err());
        let dt = "[data]\nspec = \"regression\"\n[growth]\ndelta_t = 0\n";
        assert!(ExperimentConfig::from_toml(dt).is_err());
        let unknown = "[data]\nspec = \"regression\"\n[growth]\nwidth = 3\n";
        assert!(ExperimentConfig::from_toml(unknown).is_err());
        assert!(ExperimentConfig::from_toml("[model]\nhidden = [2]\n").is_err());
    }
}
