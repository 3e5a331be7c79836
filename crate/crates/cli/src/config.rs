//! Run configuration. Precedence, highest first: command-line flags, the
//! `--config` TOML file, built-in defaults. The global `seed` is copied into
//! every section seed when the config is resolved.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pairdiff_core::data::{PhantomConfig, SplitRatios};
use pairdiff_core::diffusion::ScheduleSpec;
use pairdiff_core::sampler::SampleRequest;
use pairdiff_nets::denoiser::{Conditioning, DenoiserConfig};
use pairdiff_nets::experiment::ArmName;
use pairdiff_nets::segmenter::SegmenterConfig;
use pairdiff_nets::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Category;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Root under which run directories are created.
    pub out: PathBuf,
    pub data: DataSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub inspect: InspectSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            data: DataSection::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
            inspect: InspectSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub count: usize,
    pub phantom: PhantomConfig,
    pub split: SplitRatios,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            count: 100,
            phantom: PhantomConfig::default(),
            split: SplitRatios::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub dataset: Option<PathBuf>,
    pub model: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub conditioning: Conditioning,
    pub precision: Precision,
    pub optim: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            dataset: None,
            model: DenoiserConfig::default(),
            schedule: ScheduleSpec::default(),
            conditioning: Conditioning::Coupled,
            precision: Precision::F32,
            optim: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub checkpoint: Option<PathBuf>,
    /// Dataset whose test split seeds the chains when `seed_fraction` is set.
    pub dataset: Option<PathBuf>,
    pub request: SampleRequest,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: None,
            request: SampleRequest {
                count: 4,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Line-delimited case records; when set, training is skipped.
    pub fixtures: Option<PathBuf>,
    /// Real dataset: train split for the real corpus, val/test for scoring.
    pub real: Option<PathBuf>,
    pub synthetic: Option<PathBuf>,
    pub seeded: Option<PathBuf>,
    /// Size of the small fine-tuning set taken from the real train split.
    pub target_count: usize,
    pub arms: Vec<ArmName>,
    pub seeds: Vec<u64>,
    pub segmenter: SegmenterConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            fixtures: None,
            real: None,
            synthetic: None,
            seeded: None,
            target_count: 10,
            arms: vec![ArmName::Control, ArmName::RealPretrain, ArmName::SyntheticPretrain],
            seeds: vec![0, 1],
            segmenter: SegmenterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectSection {
    pub checkpoint: Option<PathBuf>,
    /// Number of x0 preview strips.
    pub count: usize,
    /// Preview cadence in steps; 0 picks a tenth of the schedule.
    pub preview_every: usize,
}

impl Default for InspectSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            count: 2,
            preview_every: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .context(Category::Resolution)?;
        toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .context(Category::Config)
    }

    /// Pushes the global seed into every section.
    pub fn resolve(mut self) -> Self {
        self.data.phantom.seed = self.seed;
        self.train.optim.seed = self.seed;
        self.sample.request.seed = self.seed;
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing config").context(Category::Config)
    }

    /// First 8 hex digits of the SHA-256 of the resolved TOML.
    pub fn short_hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().take(4).map(|b| format!("{b:02x}")).collect())
    }
}
