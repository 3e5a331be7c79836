//! Downstream evaluation arms and the statistics run over their Dice scores.

use std::fmt;
use std::str::FromStr;

use pairdiff_core::data::PairedSample;
use pairdiff_core::stats::{ArmScores, StatsReport};
use serde::{Deserialize, Serialize};

use crate::segmenter::{train_segmenter, SegmenterConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArmName {
    Control,
    RealPretrain,
    SyntheticPretrain,
    RealOnly,
    SyntheticOnly,
    SeededSynthetic,
}

impl ArmName {
    pub const ALL: [ArmName; 6] = [
        ArmName::Control,
        ArmName::RealPretrain,
        ArmName::SyntheticPretrain,
        ArmName::RealOnly,
        ArmName::SyntheticOnly,
        ArmName::SeededSynthetic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArmName::Control => "control",
            ArmName::RealPretrain => "real-pretrain",
            ArmName::SyntheticPretrain => "synthetic-pretrain",
            ArmName::RealOnly => "real-only",
            ArmName::SyntheticOnly => "synthetic-only",
            ArmName::SeededSynthetic => "seeded-synthetic",
        }
    }

    /// Default corpora: the pretraining arms fine-tune on the small target
    /// set, the `*-only` arms train on their corpus alone.
    pub fn default_spec(self) -> DatasetSpec {
        use Corpus::*;
        let (pretrain, train) = match self {
            ArmName::Control => (None, Target),
            ArmName::RealPretrain => (Some(Real), Target),
            ArmName::SyntheticPretrain => (Some(Synthetic), Target),
            ArmName::RealOnly => (None, Real),
            ArmName::SyntheticOnly => (None, Synthetic),
            ArmName::SeededSynthetic => (None, SeededSynthetic),
        };
        DatasetSpec { pretrain, train }
    }
}

impl fmt::Display for ArmName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArmName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArmName::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::param("arm", format!("unknown arm {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corpus {
    /// Small real training set of the target task.
    Target,
    /// Larger real corpus.
    Real,
    Synthetic,
    SeededSynthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub pretrain: Option<Corpus>,
    pub train: Corpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentArm {
    pub name: ArmName,
    pub spec: DatasetSpec,
    pub seeds: Vec<u64>,
}

impl ExperimentArm {
    pub fn new(name: ArmName, seeds: Vec<u64>) -> Self {
        Self {
            name,
            spec: name.default_spec(),
            seeds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() < 2 {
            return Err(Error::param("seeds", format!("arm {} needs at least 2 seeds", self.name)));
        }
        Ok(())
    }
}

/// Every corpus an arm may refer to; empty means unavailable.
#[derive(Debug, Clone, Default)]
pub struct BaseDatasets {
    pub target: Vec<PairedSample>,
    pub real: Vec<PairedSample>,
    pub synthetic: Vec<PairedSample>,
    pub seeded: Vec<PairedSample>,
    pub val: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

impl BaseDatasets {
    pub fn corpus(&self, c: Corpus) -> Result<&[PairedSample]> {
        let v = match c {
            Corpus::Target => &self.target,
            Corpus::Real => &self.real,
            Corpus::Synthetic => &self.synthetic,
            Corpus::SeededSynthetic => &self.seeded,
        };
        if v.is_empty() {
            return Err(Error::Data(format!("dataset {c:?} is missing")));
        }
        Ok(v)
    }
}

/// One line of the per-case results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub arm: String,
    pub seed: u64,
    pub case_id: String,
    pub dice: f64,
}

#[derive(Debug, Clone)]
pub struct ArmRun {
    pub arm: ArmName,
    pub seed: u64,
    pub val_curve: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub report: StatsReport,
    pub records: Vec<CaseRecord>,
    pub runs: Vec<ArmRun>,
}

/// Per-arm Dice lists in first-seen arm order, pooled over seeds and cases.
pub fn scores_from_records(records: &[CaseRecord]) -> Vec<ArmScores> {
    let mut arms: Vec<ArmScores> = Vec::new();
    for r in records {
        match arms.iter_mut().find(|a| a.name == r.arm) {
            Some(a) => a.dice.push(r.dice),
            None => arms.push(ArmScores {
                name: r.arm.clone(),
                dice: vec![r.dice],
            }),
        }
    }
    arms
}

/// Trains every arm for every seed and runs ANOVA plus Bonferroni t-tests
/// on the per-case test Dice.
pub fn run_experiment_suite(arms: &[ExperimentArm], data: &BaseDatasets, cfg: &SegmenterConfig) -> Result<SuiteOutcome> {
    if arms.len() < 2 {
        return Err(Error::param("arms", "need at least two arms"));
    }
    for a in arms {
        a.validate()?;
        if let Some(p) = a.spec.pretrain {
            data.corpus(p)?;
        }
        data.corpus(a.spec.train)?;
    }
    let mut records = Vec::new();
    let mut runs = Vec::new();
    for arm in arms {
        let pretrain = arm.spec.pretrain.map(|c| data.corpus(c)).transpose()?;
        let train = data.corpus(arm.spec.train)?;
        for &seed in &arm.seeds {
            let run = train_segmenter(pretrain, train, &data.val, &data.test, cfg, seed)?;
            records.extend(run.test_dice.iter().map(|c| CaseRecord {
                arm: arm.name.to_string(),
                seed,
                case_id: c.case_id.clone(),
                dice: c.dice,
            }));
            runs.push(ArmRun {
                arm: arm.name,
                seed,
                val_curve: run.val_curve,
            });
        }
    }
    let report = StatsReport::from_scores(scores_from_records(&records))?;
    Ok(SuiteOutcome { report, records, runs })
}
