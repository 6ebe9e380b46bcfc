//! Run configuration: one JSON document, unknown keys rejected everywhere.

use std::path::Path;
use std::sync::Arc;

use coda::augment::CodaConfig;
use coda::envs::{
    BouncingBall, BouncingBallConfig, Environment, MaskedDynamics, SyntheticMp,
    SyntheticMpConfig, TaskSpec, TwoRoom, TwoRoomConfig,
};
use coda::sandy::{DynExperimentConfig, ModelSpec, SandyTrainConfig};
use coda::scm::CampaignConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvSection {
    BouncingBall(BouncingBallConfig),
    SyntheticMp(SyntheticMpConfig),
    TwoRoom(TwoRoomConfig),
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection::BouncingBall(BouncingBallConfig::default())
    }
}

/// An environment seen both as a sampler and as a mask oracle.
#[derive(Clone)]
pub struct BuiltEnv {
    pub env: Arc<dyn Environment>,
    pub dynamics: Arc<dyn MaskedDynamics>,
}

impl EnvSection {
    pub fn build(&self) -> CliResult<BuiltEnv> {
        fn pair<E: Environment + 'static>(e: E) -> BuiltEnv {
            let e = Arc::new(e);
            BuiltEnv {
                env: e.clone(),
                dynamics: e,
            }
        }
        Ok(match self {
            EnvSection::BouncingBall(c) => pair(BouncingBall::new(c.clone())?),
            EnvSection::SyntheticMp(c) => pair(SyntheticMp::new(c.clone())?),
            EnvSection::TwoRoom(c) => pair(TwoRoom::new(c.clone())?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub n: usize,
    pub reset_prob: f64,
    /// Trailing share of the samples written to a separate validation file.
    pub val_fraction: f64,
}

impl Default for GenSection {
    fn default() -> Self {
        GenSection {
            n: 50_000,
            reset_prob: 0.05,
            val_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodaSection {
    pub config: CodaConfig,
    pub target: usize,
    pub max_rounds: usize,
    /// Distance threshold of the heuristic provider.
    pub heuristic_threshold: f64,
}

impl Default for CodaSection {
    fn default() -> Self {
        CodaSection {
            config: CodaConfig::default(),
            target: 35_000,
            max_rounds: 200,
            heuristic_threshold: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandySection {
    pub model: ModelSpec,
    pub train: SandyTrainConfig,
    /// Used when a training command is not given a validation file.
    pub val_fraction: f64,
    /// Asserted lower bound on the held-out AUC, when present.
    pub min_auc: Option<f64>,
}

impl Default for SandySection {
    fn default() -> Self {
        SandySection {
            model: ModelSpec::Mixture(Default::default()),
            train: SandyTrainConfig::default(),
            val_fraction: 0.2,
            min_auc: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub horizon: usize,
}

impl Default for RolloutSection {
    fn default() -> Self {
        RolloutSection { horizon: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSection,
    pub task: Option<TaskSpec>,
    pub gen: GenSection,
    pub coda: CodaSection,
    pub sandy: SandySection,
    pub dynamics: DynExperimentConfig,
    pub scm: CampaignConfig,
    pub rollout: RolloutSection,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvSection::default(),
            task: None,
            gen: GenSection::default(),
            coda: CodaSection::default(),
            sandy: SandySection::default(),
            dynamics: DynExperimentConfig::default(),
            scm: CampaignConfig::default(),
            rollout: RolloutSection::default(),
            seeds: vec![0],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must be nonempty".into()));
        }
        for (name, f) in [
            ("gen.val_fraction", self.gen.val_fraction),
            ("sandy.val_fraction", self.sandy.val_fraction),
            ("gen.reset_prob", self.gen.reset_prob),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(CliError::Config(format!("{name} must be in [0, 1)")));
            }
        }
        self.coda.config.validate()?;
        self.sandy.train.validate()?;
        self.scm.model.validate()?;
        self.env.build()?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }
}
