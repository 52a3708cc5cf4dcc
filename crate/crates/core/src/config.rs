//! Run configuration: one JSON document covering data generation, language
//! model pretraining, training and the artifact paths, with presets and
//! dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::lm::PretrainConfig;
use crate::predictor::TaskMode;
use crate::training::Hyperparams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Holds `train.jsonl`, `dev.jsonl`, `test.jsonl` and `vocab.json`.
    pub data_dir: PathBuf,
    pub lm: PathBuf,
    pub model: PathBuf,
    pub metrics: PathBuf,
    pub report: PathBuf,
    pub extract: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let run = Path::new("run");
        Self {
            data_dir: run.join("data"),
            lm: run.join("lm.json"),
            model: run.join("model.json"),
            metrics: run.join("metrics.csv"),
            report: run.join("report.json"),
            extract: run.join("rationales.jsonl"),
        }
    }
}

impl Paths {
    /// Every path placed under `dir`, keeping the default file names.
    pub fn under(dir: &Path) -> Self {
        let d = Paths::default();
        let rebase = |p: &Path| dir.join(p.strip_prefix("run").unwrap_or(p));
        Self {
            data_dir: rebase(&d.data_dir),
            lm: rebase(&d.lm),
            model: rebase(&d.model),
            metrics: rebase(&d.metrics),
            report: rebase(&d.report),
            extract: rebase(&d.extract),
        }
    }

    pub fn split(&self, split: Split) -> PathBuf {
        self.data_dir.join(format!("{}.jsonl", split.name()))
    }

    pub fn vocab(&self) -> PathBuf {
        self.data_dir.join("vocab.json")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    #[default]
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden_dim: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub pretrain: PretrainConfig,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden_dim: 16,
            out_dim: 16,
            pretrain: PretrainConfig {
                steps: 200,
                ..PretrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    BeerRegression,
    LegalClassification,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beer-regression" => Ok(Preset::BeerRegression),
            "legal-classification" => Ok(Preset::LegalClassification),
            _ => Err(Error::Config(format!(
                "unknown preset `{s}` (expected beer-regression or legal-classification)"
            ))),
        }
    }
}

/// Everything a command needs. The default is the small synthetic setup
/// that trains in about half a minute on one core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub lm: LmConfig,
    pub hyper: Hyperparams,
    /// Longer sequences are cut to this many tokens when loaded.
    pub max_len: usize,
    /// Split scored by `eval` and `extract`.
    pub eval_split: Split,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    pub fn toy() -> Self {
        Self {
            paths: Paths::default(),
            synthetic: SyntheticSpec {
                seq_len: (10, 20),
                ..SyntheticSpec::default()
            },
            model: ModelConfig::default(),
            lm: LmConfig::default(),
            hyper: Hyperparams {
                lambda_ib: 0.003,
                r_select: 0.4,
                lambda_g: 0.2,
                lr: 5e-3,
                epochs: 12,
                ..Hyperparams::classification()
            },
            max_len: 64,
            eval_split: Split::Test,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// Replaces the loss weights and optimizer settings with a published
    /// preset, keeping the seed, and switches the synthetic task to match.
    pub fn apply_preset(&mut self, preset: Preset) {
        let seed = self.hyper.seed;
        self.hyper = match preset {
            Preset::BeerRegression => Hyperparams::regression(),
            Preset::LegalClassification => Hyperparams::classification(),
        };
        self.hyper.seed = seed;
        self.synthetic.regression = preset == Preset::BeerRegression;
    }

    /// Applies `section.key=value`. The value is read as JSON when it parses
    /// and as a bare string otherwise; the key must already exist.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("`{assignment}`: {e}")))?;
        Ok(())
    }

    /// One seed for data, language model and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.synthetic.seed = seed;
        self.lm.pretrain.seed = seed;
        self.hyper.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.synthetic.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.hyper.mode == TaskMode::Regression && !self.synthetic.regression {
            return Err(Error::Config("regression mode needs synthetic.regression = true".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        let dims = [self.model.embed_dim, self.model.hidden_dim, self.lm.embed_dim, self.lm.hidden_dim, self.lm.out_dim];
        if dims.contains(&0) {
            return Err(Error::Config("model and language-model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Short stable digest of the hyperparameters, recorded with every artifact.
pub fn hyperparams_hash(hp: &Hyperparams) -> String {
    let bytes = serde_json::to_vec(hp).expect("hyperparameters serialize");
    let digest = Sha256::digest(&bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
