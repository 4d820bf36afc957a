//! Experiment configuration: a strict TOML schema.
//!
//! Unknown keys are a hard error (a typo silently ignored corrupts an
//! experiment). The config hash is the SHA-256 of the parsed, re-serialized
//! structure, so formatting and comments do not affect it while every
//! semantically meaningful field does.

use crate::cim::{CrossbarConfig, MappingStrategy};
use crate::data::{self, Dataset};
use crate::dropout::{
    adaptive_rates, DropoutConfig, DropoutVariant, DEFAULT_RANDOM_RANGE,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::mtj::{MtjDevice, VariationModel};
use crate::train::Hyperparams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSpec,
    #[serde(default)]
    pub dropout: DropoutSection,
    pub training: Hyperparams,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub mtj: MtjDevice,
    #[serde(default)]
    pub variation: VariationModel,
    #[serde(default)]
    pub crossbar: CrossbarSection,
    #[serde(default)]
    pub ood: OodSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Monte-Carlo passes; defaults to 20 for models with >= 1e5 weights,
    /// 50 otherwise.
    #[serde(default)]
    pub t_passes: Option<usize>,
    /// Checkpoint to evaluate; `train` writes `checkpoint.sdcp` under
    /// `out_dir` and later commands default to that.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutSection {
    pub variant: DropoutVariant,
    /// Explicit per-binary-layer keep rates; when absent the adaptive
    /// median-split rule assigns 0.5 to large layers and 0.2 to small ones.
    pub rates: Option<Vec<f64>>,
    pub random_range: (f64, f64),
}

impl Default for DropoutSection {
    fn default() -> Self {
        Self {
            variant: DropoutVariant::Unitary,
            rates: None,
            random_range: DEFAULT_RANDOM_RANGE,
        }
    }
}

impl DropoutSection {
    /// Resolves to a concrete per-layer config for this model.
    pub fn resolve(&self, model: &Model) -> Result<DropoutConfig> {
        let rates = match &self.rates {
            Some(r) => r.clone(),
            None => adaptive_rates(&model.binary_layer_param_counts())?,
        };
        if rates.len() != model.binary_layer_count() {
            return Err(Error::Config(format!(
                "{} dropout rates for {} binary layers",
                rates.len(),
                model.binary_layer_count()
            )));
        }
        let cfg = DropoutConfig {
            variant: self.variant,
            rates,
            random_range: self.random_range,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossbarSection {
    #[serde(flatten)]
    pub config: CrossbarConfig,
    pub strategy: MappingStrategy,
}

impl Default for CrossbarSection {
    fn default() -> Self {
        Self {
            config: CrossbarConfig::default(),
            strategy: MappingStrategy::KernelUnroll,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodSection {
    pub quantile_level: f64,
    pub threshold: f64,
    /// OOD sets evaluated by the `ood` command.
    pub sets: Vec<data::OodKind>,
    /// Strength for the additive-noise sets.
    pub noise_strength: f64,
    /// Degrees for the rotation set.
    pub rotate_degrees: f64,
}

impl Default for OodSection {
    fn default() -> Self {
        Self {
            quantile_level: crate::bayes::DEFAULT_QUANTILE_LEVEL,
            threshold: crate::bayes::DEFAULT_OOD_THRESHOLD,
            sets: vec![data::OodKind::GaussianNoise, data::OodKind::UniformNoise],
            noise_strength: 1.0,
            rotate_degrees: 60.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Corruption applied by `shift-sweep`.
    pub kind: data::OodKind,
    pub levels: usize,
    /// Maximum strength (additive noise) or angle in degrees (rotation).
    pub max_strength: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            kind: data::OodKind::AdditiveUniform,
            levels: 10,
            max_strength: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSection {
    TwoMoons {
        n_train: usize,
        n_test: usize,
        #[serde(default = "default_moons_noise")]
        noise: f64,
        /// Per-feature thermometer bits (binary input encoding).
        #[serde(default = "default_thermometer_bits")]
        thermometer_bits: usize,
    },
    Blobs {
        n_train: usize,
        n_test: usize,
        classes: usize,
        dim: usize,
        #[serde(default = "default_blob_spread")]
        spread: f64,
        #[serde(default = "default_thermometer_bits")]
        thermometer_bits: usize,
    },
    SynthDigits {
        n_train: usize,
        n_test: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        reshape: Option<Vec<usize>>,
    },
}

fn default_moons_noise() -> f64 {
    0.12
}

fn default_blob_spread() -> f64 {
    0.6
}

fn default_thermometer_bits() -> usize {
    16
}

impl DatasetSection {
    /// Loads (train, test) in the model input domain.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSection::TwoMoons {
                n_train,
                n_test,
                noise,
                thermometer_bits,
            } => {
                let train = data::two_moons(*n_train, *noise, seed);
                let test = data::two_moons(*n_test, *noise, seed.wrapping_add(1));
                // training-set bounds fix the code for both splits
                let bounds = data::thermometer_bounds(&train)?;
                Ok((
                    data::thermometer_encode_with(&train, *thermometer_bits, &bounds)?,
                    data::thermometer_encode_with(&test, *thermometer_bits, &bounds)?,
                ))
            }
            DatasetSection::Blobs {
                n_train,
                n_test,
                classes,
                dim,
                spread,
                thermometer_bits,
            } => {
                let train = data::gaussian_blobs(*n_train, *classes, *dim, *spread, seed);
                let test =
                    data::gaussian_blobs(*n_test, *classes, *dim, *spread, seed.wrapping_add(1));
                let bounds = data::thermometer_bounds(&train)?;
                Ok((
                    data::thermometer_encode_with(&train, *thermometer_bits, &bounds)?,
                    data::thermometer_encode_with(&test, *thermometer_bits, &bounds)?,
                ))
            }
            DatasetSection::SynthDigits { n_train, n_test } => Ok((
                data::synth_digits(*n_train, seed),
                data::synth_digits(*n_test, seed.wrapping_add(1)),
            )),
            DatasetSection::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Ok((
                data::load_idx_dataset(train_images, train_labels)?,
                data::load_idx_dataset(test_images, test_labels)?,
            )),
            DatasetSection::Csv {
                train,
                test,
                reshape,
            } => Ok((
                data::load_csv_dataset(train, reshape.as_deref())?,
                data::load_csv_dataset(test, reshape.as_deref())?,
            )),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.training
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.mtj.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.variation
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.crossbar
            .config
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0 < self.ood.quantile_level && self.ood.quantile_level < 1.0) {
            return Err(Error::Config(format!(
                "ood quantile level {} outside (0,1)",
                self.ood.quantile_level
            )));
        }
        if !(0.0 < self.ood.threshold && self.ood.threshold <= 1.0) {
            return Err(Error::Config(format!(
                "ood threshold {} outside (0,1]",
                self.ood.threshold
            )));
        }
        if self.sweep.levels < 2 {
            return Err(Error::Config("sweep needs at least 2 levels".to_string()));
        }
        crate::model::infer_shapes(&self.model).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Monte-Carlo pass count: explicit, or 20 for >= 1e5 weights, 50
    /// otherwise.
    pub fn resolve_t(&self, model: &Model) -> usize {
        self.experiment.t_passes.unwrap_or_else(|| {
            let params: usize = model.binary_layer_param_counts().iter().sum();
            if params >= 100_000 {
                20
            } else {
                50
            }
        })
    }

    /// SHA-256 over the parsed config's canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
[experiment]
seed = 42
out_dir = "runs/demo"

[model]
input = [32]
layers = [
  { kind = "binary-linear", out_features = 16 },
  { kind = "batch-norm" },
  { kind = "sign" },
  { kind = "binary-linear", out_features = 2 },
]

[training]
learning_rate = 0.01
epochs = 5
batch_size = 16

[dataset]
kind = "two-moons"
n_train = 64
n_test = 32
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.experiment.seed, 42);
        assert_eq!(cfg.model.layers.len(), 4);
        // defaults
        assert_eq!(cfg.ood.threshold, 0.95);
        assert_eq!(cfg.ood.quantile_level, 0.1);
        assert_eq!(cfg.crossbar.config.rows, 256);
        assert_eq!(cfg.crossbar.config.adc_bits, 9);
    }

    #[test]
    fn unknown_key_is_a_hard_error() {
        let bad = SAMPLE.replace("[training]", "[training]\nlerning_rate = 0.1");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("lerning_rate"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn hash_insensitive_to_whitespace_sensitive_to_values() {
        let a = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let spaced = SAMPLE.replace("seed = 42", "seed   =   42  # the answer");
        let b = ExperimentConfig::from_toml(&spaced).unwrap();
        assert_eq!(a.hash(), b.hash());
        let changed = SAMPLE.replace("seed = 42", "seed = 43");
        let c = ExperimentConfig::from_toml(&changed).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn default_t_depends_on_model_size() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let model = Model::build(&cfg.model, 0).unwrap();
        assert_eq!(cfg.resolve_t(&model), 50); // small model
    }

    #[test]
    fn dropout_rates_resolve_adaptively() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let model = Model::build(&cfg.model, 0).unwrap();
        let d = cfg.dropout.resolve(&model).unwrap();
        // layer sizes 512 and 32: median 272 -> [0.5, 0.2]
        assert_eq!(d.rates, vec![0.5, 0.2]);
    }

    #[test]
    fn invalid_model_composition_rejected() {
        let bad = SAMPLE.replace("input = [32]", "input = [4, 4, 2]");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn crossbar_energies_and_strategy_override() {
        let toml = format!(
            "{SAMPLE}\n[crossbar]\nrows = 128\nstrategy = \"kxk-split\"\nmemory_op_unit = \"array-reads-only\"\n\n[crossbar.energies_pj]\nmemory_decode_sense = 1.5\nrng = 3.8\naveraging = 18.42\nadder_accumulator = 0.12\ncomparator = 0.01\ncrossbar_read = 0.65\n"
        );
        let cfg = ExperimentConfig::from_toml(&toml).unwrap();
        assert_eq!(cfg.crossbar.config.rows, 128);
        assert_eq!(cfg.crossbar.config.energies_pj.memory_decode_sense, 1.5);
        assert_eq!(
            cfg.crossbar.config.memory_op_unit,
            crate::cim::MemoryOpUnit::ArrayReadsOnly
        );
        assert_eq!(cfg.crossbar.strategy, MappingStrategy::KxKSplit);
    }
}
