//! Run configuration: defaults, then a TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use neuroprune_core::data::DataSpec;
use neuroprune_core::headprune::MergeTarget;
use neuroprune_core::model::ModelConfig;
use neuroprune_core::trainer::{SweepGrid, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// `(n, m)` patterns scored by `analyze`.
    pub nm: Vec<[usize; 2]>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            nm: vec![[2, 4], [1, 4]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub alpha: Vec<f32>,
    pub beta: Vec<f32>,
    pub theta: Vec<f32>,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alpha: vec![0.0],
            beta: vec![0.0],
            theta: vec![0.0],
            workers: 1,
        }
    }
}

impl SweepConfig {
    pub fn grid(&self) -> SweepGrid {
        SweepGrid {
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            theta: self.theta.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Output directory.
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
    pub analysis: AnalysisConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataSpec::default(),
            analysis: AnalysisConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub alpha: Option<f32>,
    pub beta: Option<f32>,
    pub theta: Option<f32>,
    pub eps: Option<f32>,
    pub epochs: Option<usize>,
    pub merge_target: Option<MergeTarget>,
    pub no_prune: bool,
    pub no_zero: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Defaults, overlaid by `path` if given, overlaid by `ov`; validated.
    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(out) = &ov.out {
            self.out = out.clone();
        }
        if let Some(seed) = ov.seed {
            self.model.seed = seed;
            self.train.seed = seed;
        }
        if let Some(v) = ov.alpha {
            self.train.reg.alpha = v;
        }
        if let Some(v) = ov.beta {
            self.train.reg.beta = v;
        }
        if let Some(v) = ov.theta {
            self.train.theta = v;
        }
        if let Some(v) = ov.eps {
            self.train.reg.eps_count = v;
        }
        if let Some(v) = ov.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = ov.merge_target {
            self.train.merge_target = v;
        }
        if ov.no_prune {
            self.train.prune_heads = false;
        }
        if ov.no_zero {
            self.train.hard_zero = false;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.n_train == 0 {
            bail!("data.n_train must be at least 1");
        }
        for &[n, m] in &self.analysis.nm {
            if m == 0 || n > m {
                bail!("analysis.nm entry [{n}, {m}] needs 1 <= m and n <= m");
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
