//! Experiment configuration in sectioned `key = value` (TOML) form.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceMode;
use crate::sampler::SamplingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Adds,
    Fedavg,
    Feddrop,
    Centralized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// `λ = JSD₂(client ‖ uniform) + 0.5`.
    Jsd,
    /// `λ = (JSD − min)/(max − min) + 0.5` over the training clients.
    JsdMinmax,
    /// The configured `lambda` for every client.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Contributors weighted by local sample count.
    Samples,
    /// Every contributor weighted equally.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        #[serde(default = "defaults::classes")]
        classes: usize,
        #[serde(default = "defaults::samples_per_class")]
        samples_per_class: usize,
        #[serde(default = "defaults::dim")]
        dim: usize,
        #[serde(default = "defaults::spread")]
        spread: f64,
    },
    Csv {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Dirichlet {
        #[serde(default = "defaults::concentration")]
        concentration: f64,
        #[serde(default = "defaults::min_samples")]
        min_samples: usize,
    },
    Shards {
        #[serde(default = "defaults::shards_per_client")]
        shards_per_client: usize,
    },
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::Dirichlet {
            concentration: defaults::concentration(),
            min_samples: defaults::min_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    #[serde(default = "defaults::epsilon_init")]
    pub epsilon_init: f64,
    #[serde(default = "defaults::epsilon_decay")]
    pub epsilon_decay: f64,
    #[serde(default = "defaults::alpha_min")]
    pub alpha_min: f64,
    #[serde(default = "defaults::alpha_init")]
    pub alpha_init: f64,
    #[serde(default = "defaults::root_tolerance")]
    pub root_tolerance: f64,
    #[serde(default)]
    pub freeze_alpha: bool,
    #[serde(default = "defaults::lambda_mode")]
    pub lambda_mode: LambdaMode,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "defaults::out_dir")]
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: defaults::out_dir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    /// Total clients; a `test_client_fraction` share is held out for global evaluation.
    #[serde(default = "defaults::clients")]
    pub clients: usize,
    #[serde(default = "defaults::participation")]
    pub participation: f64,
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr_weights")]
    pub lr_weights: f64,
    #[serde(default = "defaults::lr_alpha")]
    pub lr_alpha: f64,
    /// Full supernet sizes `[d, h_1, …, h_K, classes]`; defaults to `[d, 128, 128, classes]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_sizes: Option<Vec<usize>>,
    #[serde(default = "defaults::importance")]
    pub importance: ImportanceMode,
    #[serde(default = "defaults::weighting")]
    pub aggregation_weighting: Weighting,
    #[serde(default = "defaults::feddrop_keep")]
    pub feddrop_keep: f64,
    #[serde(default = "defaults::test_client_fraction")]
    pub test_client_fraction: f64,
    #[serde(default = "defaults::local_test_fraction")]
    pub local_test_fraction: f64,
    #[serde(default)]
    pub sampling: SamplingSection,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub output: OutputSection,
}

mod defaults {
    use super::*;

    pub fn classes() -> usize {
        10
    }
    pub fn samples_per_class() -> usize {
        200
    }
    pub fn dim() -> usize {
        32
    }
    pub fn spread() -> f64 {
        1.0
    }
    pub fn concentration() -> f64 {
        0.3
    }
    pub fn min_samples() -> usize {
        20
    }
    pub fn shards_per_client() -> usize {
        2
    }
    pub fn epsilon_init() -> f64 {
        1.0
    }
    pub fn epsilon_decay() -> f64 {
        0.98
    }
    pub fn alpha_min() -> f64 {
        0.05
    }
    pub fn alpha_init() -> f64 {
        1.0
    }
    pub fn root_tolerance() -> f64 {
        1e-8
    }
    pub fn lambda_mode() -> LambdaMode {
        LambdaMode::Jsd
    }
    pub fn lambda() -> f64 {
        0.5
    }
    pub fn out_dir() -> PathBuf {
        PathBuf::from("runs/latest")
    }
    pub fn rounds() -> usize {
        200
    }
    pub fn clients() -> usize {
        20
    }
    pub fn participation() -> f64 {
        0.3
    }
    pub fn local_epochs() -> usize {
        3
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn lr_weights() -> f64 {
        0.05
    }
    pub fn lr_alpha() -> f64 {
        0.01
    }
    pub fn importance() -> ImportanceMode {
        ImportanceMode::Slim
    }
    pub fn weighting() -> Weighting {
        Weighting::Samples
    }
    pub fn feddrop_keep() -> f64 {
        0.25
    }
    pub fn test_client_fraction() -> f64 {
        0.2
    }
    pub fn local_test_fraction() -> f64 {
        0.2
    }
}

fn in_open_closed(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(key, format!("{v} must lie in (0, 1]")))
    }
}

fn in_open(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::config(key, format!("{v} must lie in (0, 1)")))
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("{v} must be positive")))
    }
}

impl ExperimentConfig {
    /// Parses and validates; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            Error::config(key, e.to_string().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        in_open_closed("participation", self.participation)?;
        in_open_closed("feddrop_keep", self.feddrop_keep)?;
        in_open("test_client_fraction", self.test_client_fraction)?;
        in_open("local_test_fraction", self.local_test_fraction)?;
        positive("lr_weights", self.lr_weights)?;
        positive("lr_alpha", self.lr_alpha)?;
        if self.clients < 2 {
            return Err(Error::config(
                "clients",
                "need at least 2 (one training, one test)",
            ));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if let Some(sizes) = &self.layer_sizes {
            if sizes.len() < 3 {
                return Err(Error::config(
                    "layer_sizes",
                    "need input, at least one hidden layer, and output",
                ));
            }
            if sizes.contains(&0) {
                return Err(Error::config(
                    "layer_sizes",
                    "every layer needs at least one unit",
                ));
            }
        }
        let s = &self.sampling;
        self.sampling_config().validate().map_err(|e| match e {
            Error::Config { key, message } => Error::config(format!("sampling.{key}"), message),
            other => other,
        })?;
        in_open_closed("sampling.alpha_init", s.alpha_init)?;
        if s.alpha_init < s.alpha_min {
            return Err(Error::config(
                "sampling.alpha_init",
                "must not be below alpha_min",
            ));
        }
        match &self.dataset {
            DatasetSpec::Blobs {
                classes,
                samples_per_class,
                dim,
                spread,
            } => {
                if *classes < 2 || *samples_per_class == 0 || *dim == 0 {
                    return Err(Error::config(
                        "dataset",
                        "blobs need ≥ 2 classes and positive sizes",
                    ));
                }
                if !(*spread >= 0.0) {
                    return Err(Error::config("dataset.spread", "must be non-negative"));
                }
            }
            DatasetSpec::Csv { .. } => {}
        }
        match &self.partition {
            PartitionSpec::Dirichlet { concentration, .. } => {
                positive("partition.concentration", *concentration)?
            }
            PartitionSpec::Shards { shards_per_client } => {
                if *shards_per_client == 0 {
                    return Err(Error::config(
                        "partition.shards_per_client",
                        "must be at least 1",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn sampling_config(&self) -> SamplingConfig {
        SamplingConfig {
            epsilon_init: self.sampling.epsilon_init,
            epsilon_decay: self.sampling.epsilon_decay,
            alpha_min: self.sampling.alpha_min,
            root_tolerance: self.sampling.root_tolerance,
            lambda: self.sampling.lambda,
            rng_seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
algorithm = "adds"

[dataset]
kind = "blobs"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.rounds, 200);
        assert_eq!(cfg.participation, 0.3);
        assert_eq!(cfg.local_epochs, 3);
        assert_eq!(cfg.sampling.epsilon_init, 1.0);
        assert_eq!(cfg.sampling.epsilon_decay, 0.98);
        assert_eq!(cfg.partition, PartitionSpec::default());
    }

    #[test]
    fn bad_participation_names_the_key() {
        let err = ExperimentConfig::parse(&format!("participation = 1.5\n{MINIMAL}")).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "participation"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse(&format!("colour = 3\n{MINIMAL}")).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        let err = ExperimentConfig::parse(
            "algorithm = \"adds\"\n[dataset]\nkind = \"blobs\"\nwidth = 3\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn missing_dataset_is_rejected() {
        assert!(ExperimentConfig::parse("algorithm = \"fedavg\"\n").is_err());
    }

    #[test]
    fn nested_keys_are_prefixed() {
        let text = format!("{MINIMAL}\n[sampling]\nalpha_min = 1.5\n");
        match ExperimentConfig::parse(&text).unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "sampling.alpha_min"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn serialized_config_parses_back_equal() {
        let text = r#"
algorithm = "feddrop"
seed = 9
rounds = 4
layer_sizes = [32, 16, 10]
importance = "lrp"

[sampling]
lambda_mode = "fixed"
lambda = 0.75

[dataset]
kind = "csv"
path = "data/digits.csv"

[partition]
kind = "shards"
shards_per_client = 3
"#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        let minimal = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(
            ExperimentConfig::parse(&minimal.to_toml()).unwrap(),
            minimal
        );
    }
}
