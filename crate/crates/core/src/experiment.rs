//! Experiment configuration: one TOML file holding every sub-config, hashed
//! into every artifact it produces.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::eval::SegConfig;
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::ScheduleConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: GenConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Dataset directory; relative paths resolve against the output root.
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: GenConfig::default(),
            n_train: 512,
            n_test: 128,
            seed: 0,
            dir: PathBuf::from("data"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub segmenter: SegConfig,
    /// Segmenter seeds; every condition is trained once per seed.
    pub seeds: Vec<u64>,
    /// Synthetic pairs generated per training mask.
    pub synthetic_per_mask: usize,
    /// Real training pairs given to the segmenters (0 = all). A small real set
    /// leaves room for augmentation to matter.
    pub real_subset: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            segmenter: SegConfig::default(),
            seeds: vec![0, 1, 2],
            synthetic_per_mask: 1,
            real_subset: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_root: PathBuf,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            output_root: PathBuf::from("runs"),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.message().to_string();
            let line = e
                .span()
                .map(|s| format!(" (line {})", text[..s.start].lines().count().max(1)))
                .unwrap_or_default();
            Error::Invalid {
                field: origin.display().to_string(),
                reason: format!("{field}{line}"),
            }
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_str(&text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::invalid("name", "must be a non-empty plain name"));
        }
        let schedule = self.schedule.build()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate(&schedule)?;
        self.data.generator.validate()?;
        self.eval.segmenter.validate()?;
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::invalid("data.n_train", "train and test splits need at least one pair"));
        }
        if self.data.generator.resolution != self.model.resolution {
            return Err(Error::invalid(
                "data.generator.resolution",
                format!(
                    "{} does not match model.resolution {}",
                    self.data.generator.resolution, self.model.resolution
                ),
            ));
        }
        if self.data.generator.channels != self.model.channels {
            return Err(Error::invalid("data.generator.channels", "does not match model.channels"));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::invalid("eval.seeds", "needs at least one seed"));
        }
        if self.eval.synthetic_per_mask == 0 {
            return Err(Error::invalid("eval.synthetic_per_mask", "must be at least 1"));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::invalid("ablate.seeds", "needs at least one seed"));
        }
        Ok(())
    }

    /// Short SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config is serializable");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root.join(&self.name)
    }

    pub fn data_dir(&self) -> PathBuf {
        if self.data.dir.is_absolute() {
            self.data.dir.clone()
        } else {
            self.output_root.join(&self.data.dir)
        }
    }
}
