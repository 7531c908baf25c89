//! Flat JSON run configuration.
//!
//! Every key is optional; missing keys take the defaults listed by
//! [`defaults_table`]. Unknown keys are rejected so typos surface early.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{PartitionScheme, PartitionSpec};
use crate::error::{Error, Result};
use crate::fl::{Aggregation, AlgorithmKind, Features, HyperParams, LocalSchedule};
use crate::nn::MlpSpec;
use crate::rng::{self, stream_key, PRNG_FAMILY, SETUP_ROUND};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Dirichlet,
    Pathological,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

/// `auto` follows the algorithm; the others force a scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationChoice {
    Auto,
    Vanilla,
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: AlgorithmKind,
    pub aggregation: AggregationChoice,
    pub layer_sizes: Vec<usize>,

    pub eta_l: f64,
    pub eta_g: f64,
    pub alpha: f64,
    pub rho: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub beta: f64,
    pub mu_prox: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,

    pub partition: PartitionKind,
    pub dirichlet_mu: f64,
    pub pathological_n: usize,
    pub num_clients: usize,

    pub dataset: DatasetKind,
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Z-score features with train-set moments before training.
    pub standardize: bool,

    pub rounds: usize,
    pub participation_ratio: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub eval_every: usize,
    pub master_seed: u64,
    pub prng: String,
    pub output_path: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        Self {
            algorithm: AlgorithmKind::FedMrur,
            aggregation: AggregationChoice::Auto,
            layer_sizes: vec![16, 32, 10],
            eta_l: hp.eta_l,
            eta_g: hp.eta_g,
            alpha: hp.alpha,
            rho: hp.rho,
            gamma: hp.gamma,
            sigma: hp.sigma,
            beta: hp.beta,
            mu_prox: hp.mu_prox,
            weight_decay: hp.weight_decay,
            lr_decay: hp.lr_decay,
            partition: PartitionKind::Dirichlet,
            dirichlet_mu: 0.3,
            pathological_n: 3,
            num_clients: 100,
            dataset: DatasetKind::Synthetic,
            num_classes: 10,
            dim: 16,
            per_class: 500,
            test_per_class: 100,
            spread: 3.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            standardize: true,
            rounds: 300,
            participation_ratio: 0.05,
            batch_size: 20,
            local_epochs: 1,
            eval_every: 1,
            master_seed: 0,
            prng: PRNG_FAMILY.to_string(),
            output_path: PathBuf::from("metrics.csv"),
        }
    }
}

/// Human-readable list of keys and their defaults.
pub fn defaults_table() -> String {
    let value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut out = String::new();
    if let Value::Object(map) = value {
        for (k, v) in map {
            out.push_str(&format!("  {k:<20} {v}\n"));
        }
    }
    out
}

fn known_keys() -> Vec<String> {
    match serde_json::to_value(RunConfig::default()).expect("config serializes") {
        Value::Object(map) => map.keys().cloned().collect(),
        _ => unreachable!(),
    }
}

/// 1-based line of the first occurrence of `"key"` in `text`, or 0.
fn line_of(text: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    text.find(&needle)
        .map(|pos| text[..pos].matches('\n').count() + 1)
        .unwrap_or(0)
}

impl RunConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_path_with_overrides(path, &[])
    }

    pub fn from_path_with_overrides(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, overrides)
    }

    /// Parses a JSON document and applies `key=value` overrides. Override
    /// values are read as JSON, falling back to a plain string.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(mut map) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let known = known_keys();
        for key in map.keys() {
            if !known.contains(key) {
                return Err(Error::UnknownKey {
                    key: key.clone(),
                    line: line_of(text, key),
                });
            }
        }
        let cfg: RunConfig = if overrides.is_empty() {
            serde_json::from_str(text)?
        } else {
            for item in overrides {
                let (k, v) = item.split_once('=').ok_or_else(|| {
                    Error::Config(format!("override `{item}` is not of the form key=value"))
                })?;
                let k = k.trim();
                if !known.iter().any(|x| x == k) {
                    return Err(Error::UnknownKey {
                        key: k.to_string(),
                        line: 0,
                    });
                }
                let v = serde_json::from_str(v.trim())
                    .unwrap_or_else(|_| Value::String(v.trim().to_string()));
                map.insert(k.to_string(), v);
            }
            serde_json::from_value(Value::Object(map))?
        };
        if let Some((key, expected)) = cfg.violation() {
            let value = serde_json::to_value(&cfg)
                .ok()
                .and_then(|v| v.get(key).cloned())
                .map(|v| v.to_string())
                .unwrap_or_default();
            return Err(Error::OutOfRange {
                key: key.to_string(),
                value,
                expected: expected.to_string(),
                line: line_of(text, key),
            });
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Returns the first violated constraint as `(key, expected)`.
    pub fn violation(&self) -> Option<(&'static str, &'static str)> {
        if let Some(v) = self.hyper().violation() {
            return Some(v);
        }
        let checks: [(&str, bool, &str); 12] = [
            (
                "layer_sizes",
                self.layer_sizes.len() >= 2 && self.layer_sizes.iter().all(|&s| s >= 1),
                "at least 2 positive widths",
            ),
            ("dirichlet_mu", self.dirichlet_mu > 0.0, "> 0"),
            ("pathological_n", self.pathological_n >= 1, ">= 1"),
            ("num_clients", self.num_clients >= 1, ">= 1"),
            ("num_classes", self.num_classes >= 2, ">= 2"),
            ("spread", self.spread >= 0.0, ">= 0"),
            ("rounds", self.rounds >= 1, ">= 1"),
            (
                "participation_ratio",
                self.participation_ratio > 0.0 && self.participation_ratio <= 1.0,
                "in (0, 1]",
            ),
            ("batch_size", self.batch_size >= 1, ">= 1"),
            ("local_epochs", self.local_epochs >= 1, ">= 1"),
            ("eval_every", self.eval_every >= 1, ">= 1"),
            ("prng", self.prng == PRNG_FAMILY, "\"chacha8\""),
        ];
        checks
            .into_iter()
            .find(|(_, ok, _)| !ok)
            .map(|(k, _, e)| (k, e))
    }

    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            eta_l: self.eta_l,
            eta_g: self.eta_g,
            alpha: self.alpha,
            rho: self.rho,
            gamma: self.gamma,
            sigma: self.sigma,
            beta: self.beta,
            mu_prox: self.mu_prox,
            weight_decay: self.weight_decay,
            lr_decay: self.lr_decay,
        }
    }

    pub fn model(&self) -> Result<MlpSpec> {
        MlpSpec::new(self.layer_sizes.clone())
    }

    pub fn features(&self) -> Features {
        self.algorithm.features()
    }

    pub fn aggregation(&self) -> Aggregation {
        match self.aggregation {
            AggregationChoice::Vanilla => Aggregation::Vanilla,
            AggregationChoice::Normalized => Aggregation::Normalized,
            AggregationChoice::Auto if self.features().normalized => Aggregation::Normalized,
            AggregationChoice::Auto => Aggregation::Vanilla,
        }
    }

    pub fn schedule(&self) -> LocalSchedule {
        LocalSchedule {
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let scheme = match self.partition {
            PartitionKind::Dirichlet => PartitionScheme::Dirichlet {
                mu: self.dirichlet_mu,
            },
            PartitionKind::Pathological => PartitionScheme::Pathological {
                n: self.pathological_n,
            },
        };
        PartitionSpec {
            scheme,
            num_clients: self.num_clients,
            seed: stream_key(self.master_seed, SETUP_ROUND, rng::setup::PARTITION),
        }
    }

    pub fn data_seed(&self) -> u64 {
        stream_key(self.master_seed, SETUP_ROUND, rng::setup::DATA)
    }

    pub fn init_seed(&self) -> u64 {
        stream_key(self.master_seed, SETUP_ROUND, rng::setup::MODEL_INIT)
    }
}
