//! Experiment manifests: a training config plus evaluation and sweep
//! plans, read from TOML with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Placement;
use crate::trainer::TrainConfig;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvSetName {
    Seen,
    Unseen,
}

impl EnvSetName {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvSetName::Seen => "seen",
            EnvSetName::Unseen => "unseen",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalPlan {
    pub episodes: usize,
    /// One success-rate row is reported per value.
    pub mc_samples: Vec<usize>,
    pub env_sets: Vec<EnvSetName>,
    pub fgsm: bool,
    pub cycle: bool,
    pub entropy: bool,
    /// Levels whose demonstrations feed the representation metrics.
    pub analysis_levels: usize,
    pub seed: u64,
    /// Unseen-set evaluation period during training, in env steps; 0 disables.
    pub interval: u64,
    /// Checkpoint period during training, in env steps; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    /// Held-out dynamics draws forming the unseen pole set.
    pub held_out_dynamics: usize,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            episodes: 100,
            mc_samples: vec![1, 10],
            env_sets: vec![EnvSetName::Seen, EnvSetName::Unseen],
            fgsm: true,
            cycle: true,
            entropy: true,
            analysis_levels: 1,
            seed: 0,
            interval: 50_000,
            checkpoint_interval: 50_000,
            held_out_dynamics: 20,
        }
    }
}

impl EvalPlan {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::config("eval.episodes must be positive"));
        }
        if self.mc_samples.is_empty() || self.mc_samples.contains(&0) {
            return Err(Error::config(
                "eval.mc_samples must list positive sample counts",
            ));
        }
        if self.analysis_levels == 0 || self.held_out_dynamics == 0 {
            return Err(Error::config(
                "eval.analysis_levels and eval.held_out_dynamics must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Alpha,
    Placement,
    #[serde(rename = "M")]
    Mc,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(AblationAxis::Alpha),
            "placement" => Ok(AblationAxis::Placement),
            "M" | "m" | "mc" => Ok(AblationAxis::Mc),
            _ => Err(Error::config(format!(
                "unknown ablation axis `{s}` (alpha, placement, M)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationPlan {
    pub seeds: Vec<u64>,
    pub alpha: Vec<f64>,
    pub placement: Vec<Placement>,
    pub mc_samples: Vec<usize>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            alpha: vec![0.0, 0.1, 0.5, 1.0],
            placement: vec![
                Placement::First,
                Placement::AfterBlock(2),
                Placement::Residual,
            ],
            mc_samples: vec![1, 5, 10],
        }
    }
}

impl AblationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("ablate.seeds must not be empty"));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::config(format!(
                "ablate.alpha value {a} outside [0, 1]"
            )));
        }
        if self.mc_samples.contains(&0) {
            return Err(Error::config("ablate.mc_samples values must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalPlan,
    #[serde(default)]
    pub ablate: AblationPlan,
}

impl ExperimentManifest {
    pub fn new(out_dir: impl Into<PathBuf>, train: TrainConfig) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            out_dir: out_dir.into(),
            train,
            eval: EvalPlan::default(),
            ablate: AblationPlan::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "manifest schema_version {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.train.validate()?;
        self.eval.validate()?;
        self.ablate.validate()
    }
}
