//! Flat TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, synth_classification, synth_images, synth_lm, synth_sequences, Dataset, MarkovChain, Split};
use crate::error::{DmpError, Result};
use crate::gate::{validate_gate_settings, Granularity, DEFAULT_ALPHA_INIT, DEFAULT_BETA};
use crate::model::{Arch, ModelSpec};
use crate::nn::batchnorm::{DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::nn::GateSettings;
use crate::objective::ObjectiveConfig;
use crate::train::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Gaussian blobs, `[input_dim]` features.
    SynthBlobs,
    /// Class templates in noise, `[in_channels, image_size, image_size]`.
    SynthImages,
    /// Majority-marker token sequences.
    SynthSequences,
    /// Streams from a random Markov chain over `vocab` states.
    SynthLm,
    /// CIFAR-10 binary batches under `data_dir`.
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub arch: Arch,
    /// Ignored when `gated` is false.
    pub granularity: Granularity,
    pub gated: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    pub snapshot_every: u64,
    pub freeze_gates: bool,
    pub augment: bool,

    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub target_c: f64,

    /// Mask threshold; the granularity's default when absent.
    pub gate_threshold: Option<f64>,
    pub gate_beta: f64,
    pub alpha_init: f64,

    pub num_classes: usize,
    pub input_dim: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub blocks_per_stage: usize,
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,

    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
    /// Class separation of the synthetic classification data.
    pub margin: f64,
    pub seq_len: usize,

    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let o = ObjectiveConfig::default();
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            arch: Arch::ToyConvnet,
            granularity: Granularity::Filter,
            gated: true,
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            momentum: t.momentum,
            decay_epochs: t.decay_epochs,
            decay_factor: t.decay_factor,
            seed: 0,
            snapshot_every: 0,
            freeze_gates: false,
            augment: false,
            lambda1: o.lambda1,
            lambda2: o.lambda2,
            lambda3: o.lambda3,
            target_c: o.target_c,
            gate_threshold: None,
            gate_beta: DEFAULT_BETA,
            alpha_init: DEFAULT_ALPHA_INIT,
            num_classes: 10,
            input_dim: 16,
            in_channels: 3,
            image_size: 8,
            widths: vec![8, 16, 16],
            strides: vec![1, 2, 1],
            blocks_per_stage: 1,
            vocab: 16,
            embed: 8,
            hidden: 32,
            lstm_layers: 1,
            bn_momentum: DEFAULT_MOMENTUM,
            bn_eps: DEFAULT_EPS,
            dataset: DatasetKind::SynthImages,
            data_dir: None,
            train_size: 1000,
            test_size: 500,
            margin: 1.0,
            seq_len: 12,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn field(name: &str, msg: impl Into<String>) -> DmpError {
    DmpError::config(name, msg)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| DmpError::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DmpError::ConfigParse(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DmpError::ConfigParse(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            momentum: self.momentum,
            decay_epochs: self.decay_epochs.clone(),
            decay_factor: self.decay_factor,
            seed: self.seed,
            objective: ObjectiveConfig {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                lambda3: self.lambda3,
                target_c: self.target_c,
            },
            snapshot_every: self.snapshot_every,
            freeze_gates: self.freeze_gates,
            augment: self.augment,
        }
    }

    pub fn gate_settings(&self) -> Option<GateSettings> {
        self.gated.then_some(GateSettings {
            granularity: self.granularity,
            threshold: self.gate_threshold,
            beta: self.gate_beta,
            alpha_init: self.alpha_init,
        })
    }

    pub fn model_spec(&self) -> ModelSpec {
        let classes = if self.arch == Arch::LstmLm {
            self.vocab
        } else {
            self.num_classes
        };

        ModelSpec {
            arch: self.arch,
            gates: self.gate_settings(),
            num_classes: classes,
            in_channels: self.in_channels,
            image_size: self.image_size,
            input_dim: self.input_dim,
            widths: self.widths.clone(),
            strides: self.strides.clone(),
            blocks_per_stage: self.blocks_per_stage,
            vocab: self.vocab,
            embed: self.embed,
            hidden: self.hidden,
            lstm_layers: self.lstm_layers,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
            init_seed: self.seed,
        }
    }

    /// Every check that can run without touching data or building a model.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(field(
                "schema_version",
                format!("expected {CONFIG_SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        self.train_config().validate()?;
        if self.gated {
            if !self.arch.supported_granularities().contains(&self.granularity) {
                let ok: Vec<&str> = self.arch.supported_granularities().iter().map(|g| g.as_str()).collect();
                return Err(field(
                    "granularity",
                    format!(
                        "{} gates do not fit arch {} (supported: {})",
                        self.granularity.as_str(),
                        self.arch.as_str(),
                        ok.join(", ")
                    ),
                ));
            }
            if let Some(t) = self.gate_threshold {
                validate_gate_settings(t, self.gate_beta).map_err(|e| field("gate_threshold", e.to_string()))?;
            }
            validate_gate_settings(self.granularity.default_threshold(), self.gate_beta)
                .map_err(|e| field("gate_beta", e.to_string()))?;
            if !self.alpha_init.is_finite() {
                return Err(field("alpha_init", "must be finite"));
            }
        }
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(field(name, "must be positive"))
            } else {
                Ok(())
            }
        };
        if self.arch != Arch::LstmLm && self.num_classes < 2 {
            return Err(field("num_classes", "need at least two classes"));
        }
        match self.arch {
            Arch::Mlp => positive("input_dim", self.input_dim)?,
            Arch::ToyConvnet => {
                if self.widths.is_empty() || self.widths.contains(&0) {
                    return Err(field("widths", "need one positive width per conv unit"));
                }
                if self.strides.len() != self.widths.len() || self.strides.contains(&0) {
                    return Err(field("strides", "need one positive stride per width"));
                }
            }
            Arch::ResnetSmall => {
                if self.widths.is_empty() || self.widths.contains(&0) {
                    return Err(field("widths", "need one positive width per stage"));
                }
                positive("blocks_per_stage", self.blocks_per_stage)?;
            }
            Arch::LstmClassifier | Arch::LstmLm => {
                positive("embed", self.embed)?;
                positive("hidden", self.hidden)?;
                if !(1..=2).contains(&self.lstm_layers) {
                    return Err(field("lstm_layers", "must be 1 or 2"));
                }
                if self.vocab < 4 {
                    return Err(field("vocab", "must be at least 4"));
                }
            }
        }
        if matches!(self.arch, Arch::ToyConvnet | Arch::ResnetSmall) {
            positive("in_channels", self.in_channels)?;
            positive("image_size", self.image_size)?;
        }
        let want: &[DatasetKind] = match self.arch {
            Arch::Mlp => &[DatasetKind::SynthBlobs],
            Arch::ToyConvnet | Arch::ResnetSmall => &[DatasetKind::SynthImages, DatasetKind::Cifar10],
            Arch::LstmClassifier => &[DatasetKind::SynthSequences],
            Arch::LstmLm => &[DatasetKind::SynthLm],
        };
        if !want.contains(&self.dataset) {
            return Err(field(
                "dataset",
                format!("{:?} cannot feed arch {}", self.dataset, self.arch.as_str()),
            ));
        }
        if self.dataset == DatasetKind::Cifar10 {
            if self.data_dir.is_none() {
                return Err(field("data_dir", "required for cifar10"));
            }
            if self.in_channels != 3 || self.image_size != 32 || self.num_classes != 10 {
                return Err(field(
                    "image_size",
                    "cifar10 needs in_channels = 3, image_size = 32, num_classes = 10",
                ));
            }
        } else {
            positive("train_size", self.train_size)?;
            positive("test_size", self.test_size)?;
        }
        if self.dataset == DatasetKind::SynthBlobs && self.input_dim < self.num_classes {
            return Err(field("input_dim", "synthetic blobs need input_dim ≥ num_classes"));
        }
        if self.dataset == DatasetKind::SynthSequences && self.num_classes != 2 {
            return Err(field("num_classes", "the sequence task has exactly two classes"));
        }
        if matches!(self.dataset, DatasetKind::SynthSequences | DatasetKind::SynthLm) {
            positive("seq_len", self.seq_len)?;
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(field("margin", "must be finite and ≥ 0"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(field("output_dir", "must not be empty"));
        }
        Ok(())
    }

    /// Train and test splits. Synthetic data uses `seed` for train and
    /// `seed + 1` for test.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (s, n, m) = (self.seed, self.train_size, self.test_size);
        let pair = |mut a: Dataset, mut b: Dataset| {
            a.split = Split::Train;
            b.split = Split::Test;
            (a, b)
        };
        Ok(match self.dataset {
            DatasetKind::SynthBlobs => pair(
                synth_classification(n, self.num_classes, self.input_dim, self.margin, s)?,
                synth_classification(m, self.num_classes, self.input_dim, self.margin, s + 1)?,
            ),
            DatasetKind::SynthImages => pair(
                synth_images(n, self.num_classes, self.in_channels, self.image_size, self.margin, s)?,
                synth_images(
                    m,
                    self.num_classes,
                    self.in_channels,
                    self.image_size,
                    self.margin,
                    s + 1,
                )?,
            ),
            DatasetKind::SynthSequences => pair(
                synth_sequences(n, self.vocab, self.seq_len, s)?,
                synth_sequences(m, self.vocab, self.seq_len, s + 1)?,
            ),
            DatasetKind::SynthLm => {
                let chain = MarkovChain::random(self.vocab, s)?;
                pair(
                    synth_lm(&chain, n, self.seq_len, s)?,
                    synth_lm(&chain, m, self.seq_len, s + 1)?,
                )
            }
            DatasetKind::Cifar10 => data::load_cifar10(self.data_dir.as_deref().expect("validated"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::from_toml("lamda1 = 0.1\n").unwrap_err().to_string();
        assert!(
            err.contains("lamda1") && err.contains("lambda1") && err.contains("output_dir"),
            "{err}"
        );
    }

    #[test]
    fn negative_lambda_names_the_field() {
        let err = RunConfig::from_toml("lambda1 = -0.1\n").unwrap_err();
        assert!(
            matches!(err, DmpError::Config { ref field, .. } if field == "lambda1"),
            "{err}"
        );
    }

    #[test]
    fn incompatible_granularity_is_rejected() {
        for (arch, g) in [
            ("toy-convnet", "subnetwork"),
            ("mlp", "node"),
            ("lstm-classifier", "filter"),
        ] {
            let text = format!("arch = \"{arch}\"\ngranularity = \"{g}\"\n");
            let err = RunConfig::from_toml(&text).unwrap_err();
            assert!(
                matches!(err, DmpError::Config { ref field, .. } if field == "granularity"),
                "{err}"
            );
        }
        // without gates the granularity is irrelevant
        RunConfig::from_toml("arch = \"toy-convnet\"\ngranularity = \"subnetwork\"\ngated = false\n").unwrap();
    }

    #[test]
    fn wrong_schema_version() {
        assert!(RunConfig::from_toml("schema_version = 7\n").is_err());
    }
}
