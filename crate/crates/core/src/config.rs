//! Run configuration: one JSON document with a section per subsystem.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::sync::Arc;

use crate::bench::BenchmarkConfig;
use crate::dynamics::{BicycleModel, DynamicsError, LqrWeights, NoiseModel, DEFAULT_WHEELBASE};
use crate::mpc::{PlanError, Planner, PlannerConfig, TerminalMode};
use crate::pac::PacConfig;
use crate::td3::{EpisodeConfig, MdpConfig, Td3Config, TrainSetup, ValueFunction};
use crate::world::{ConstraintConfig, EnvironmentConfig, LidarConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// Vehicle, noise and task parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsSection {
    pub wheelbase: f64,
    pub noise: NoiseModel,
    pub lqr: LqrWeights,
    pub robot_radius: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub goal_radius: f64,
    /// Diagonal of the running cost on `x − x_G`.
    pub running_cost_q: [f64; 5],
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            wheelbase: DEFAULT_WHEELBASE,
            noise: NoiseModel::SIMULATION,
            lqr: LqrWeights::default(),
            robot_radius: 0.2,
            v_min: -1.0,
            v_max: 3.0,
            goal_radius: 1.0,
            running_cost_q: [0.01, 0.01, 0.0, 0.0, 0.0],
        }
    }
}

impl DynamicsSection {
    pub fn model(&self) -> Result<BicycleModel, DynamicsError> {
        BicycleModel::new(self.wheelbase)
    }

    pub fn constraint(&self) -> ConstraintConfig {
        ConstraintConfig { robot_radius: self.robot_radius, v_min: self.v_min, v_max: self.v_max }
    }
}

/// MDP-specific settings for value-function training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Td3Section {
    #[serde(flatten)]
    pub td3: Td3Config,
    pub violation_penalty: f64,
}

impl Default for Td3Section {
    fn default() -> Self {
        Self { td3: Td3Config::default(), violation_penalty: MdpConfig::default().violation_penalty }
    }
}

/// Bound optimiser and receding-horizon settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PacSection {
    #[serde(flatten)]
    pub optimizer: PacConfig,
    #[serde(flatten)]
    pub planner: PlannerConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub dynamics: DynamicsSection,
    pub lidar: LidarConfig,
    pub environment: EnvironmentConfig,
    pub td3: Td3Section,
    pub pac: PacSection,
    pub benchmark: BenchmarkConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: Config = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dynamics.model()?;
        if !self.dynamics.noise.is_valid() {
            return Err(ConfigError::Invalid("noise covariance must be finite and non-negative".into()));
        }
        if self.dynamics.v_min >= self.dynamics.v_max {
            return Err(ConfigError::Invalid("v_min must be below v_max".into()));
        }
        if self.lidar.beams == 0 || self.lidar.range_min >= self.lidar.range_max {
            return Err(ConfigError::Invalid("lidar needs beams and range_min < range_max".into()));
        }
        self.pac.optimizer.validate().map_err(ConfigError::Invalid)?;
        let p = &self.pac.planner;
        if p.horizon == 0 || p.replan_steps == 0 || p.replan_steps > p.horizon || p.exec_substeps == 0 {
            return Err(ConfigError::Invalid("planner needs 0 < replan_steps <= horizon and exec_substeps > 0".into()));
        }
        if !(self.benchmark.timeout > 0.0) {
            return Err(ConfigError::Invalid("benchmark timeout must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the serialised configuration.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serialises").as_bytes()))
    }

    pub fn planner(&self, mode: TerminalMode, vf: Option<Arc<ValueFunction>>) -> Result<Planner, ConfigError> {
        Ok(Planner::new(
            self.dynamics.model()?,
            self.dynamics.noise,
            self.dynamics.lqr.clone(),
            self.dynamics.constraint(),
            self.dynamics.running_cost_q,
            self.lidar,
            self.pac.planner.clone(),
            self.pac.optimizer.clone(),
            mode,
            vf,
        )?)
    }

    pub fn mdp(&self) -> MdpConfig {
        MdpConfig {
            v_min: self.dynamics.v_min,
            v_max: self.dynamics.v_max,
            lidar: self.lidar,
            workspace: self.environment.workspace,
            q_diag: self.dynamics.running_cost_q,
            violation_penalty: self.td3.violation_penalty,
            ..MdpConfig::default()
        }
    }

    pub fn episode(&self) -> Result<EpisodeConfig, ConfigError> {
        Ok(EpisodeConfig {
            model: self.dynamics.model()?,
            noise: self.dynamics.noise,
            mdp: self.mdp(),
            constraint: self.dynamics.constraint(),
            goal_radius: self.dynamics.goal_radius,
            max_steps: self.td3.td3.max_episode_steps,
        })
    }

    pub fn train_setup(&self, seed: u64) -> Result<TrainSetup, ConfigError> {
        Ok(TrainSetup {
            td3: self.td3.td3.clone(),
            episode: self.episode()?,
            environment: self.environment.clone(),
            seed,
        })
    }
}
