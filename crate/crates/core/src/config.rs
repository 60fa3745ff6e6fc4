//! Central configuration: every tunable number lives here, with defaults
//! that the test suite pins. Configs round-trip through TOML so experiments
//! can be reproduced from a single file.

use crate::sim::MultirotorParams;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Linear (trajectory-tracking) tube MPC pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearMpcConfig {
    /// Planning horizon in steps.
    pub horizon: usize,
    /// Planning/replanning period [s].
    pub dt: f64,
    /// Stage cost diagonal: position, velocity, tilt.
    pub q_pos: f64,
    pub q_vel: f64,
    pub q_tilt: f64,
    /// Input cost diagonal: thrust deviation, tilt commands.
    pub r_thrust: f64,
    pub r_tilt: f64,
    /// State constraint box (per axis).
    pub pos_limit: f64,
    pub vel_limit: f64,
    pub tilt_limit: f64,
    /// Bound on the commanded tilt. Wider than the state limit: the ancillary
    /// feedback must out-command the worst-case tube excursion, and the tilt
    /// state (a lag toward the command) never reaches a transient command.
    pub tilt_cmd_limit: f64,
    /// Total-thrust bounds as fractions of hover thrust mg.
    pub thrust_min_frac: f64,
    pub thrust_max_frac: f64,
    /// First-order tilt-lag time constants of the attitude loop; identified
    /// from step responses when absent.
    pub tau_roll: Option<f64>,
    pub tau_pitch: Option<f64>,
    pub tube: TubeConfig,
}

impl Default for LinearMpcConfig {
    fn default() -> Self {
        Self {
            horizon: 30,
            dt: 0.1,
            q_pos: 10.0,
            q_vel: 1.0,
            q_tilt: 1.0,
            r_thrust: 1.0,
            r_tilt: 5.0,
            pos_limit: 5.0,
            vel_limit: 5.0,
            tilt_limit: 1.0,
            tilt_cmd_limit: 2.0,
            thrust_min_frac: 0.1,
            thrust_max_frac: 2.0,
            tau_roll: None,
            tau_pitch: None,
            tube: TubeConfig::default(),
        }
    }
}

/// Monte-Carlo tube estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubeConfig {
    pub rollouts: usize,
    pub horizon_steps: usize,
    /// Inflation applied to the raw componentwise maximum.
    pub safety: f64,
    pub seed: u64,
    /// Design disturbance set upper bound, as a fraction of mg (lower is 0).
    pub w_max_frac: f64,
}

impl Default for TubeConfig {
    fn default() -> Self {
        Self { rollouts: 500, horizon_steps: 150, safety: 1.1, seed: 1234, w_max_frac: 0.3 }
    }
}

/// Nonlinear (flip) tube MPC pipeline: ancillary NMPC solver settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NmpcConfig {
    pub horizon: usize,
    /// Total prediction horizon [s]; stage length is horizon_time / horizon.
    pub horizon_time: f64,
    /// Levenberg-Marquardt regularization added to the Gauss-Newton Hessian.
    pub lm_reg: f64,
    /// NLP and QP convergence tolerance.
    pub tol: f64,
    pub max_sqp_iter: usize,
    pub max_qp_iter: usize,
    /// Stage-cost discount factor.
    pub gamma: f64,
    /// Stage weights: position, velocity, attitude (MRP), thrust, body rate.
    pub q_pos: f64,
    pub q_vel: f64,
    pub q_att: f64,
    pub r_thrust: f64,
    pub r_rate: f64,
    /// Total-thrust bounds as fractions of mg.
    pub thrust_min_frac: f64,
    pub thrust_max_frac: f64,
    /// Body-rate command bound [rad/s].
    pub rate_limit: f64,
    /// Active-constraint detection threshold for the sensitivity extraction.
    pub strict_complementarity: f64,
    pub tube: TubeConfig,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            horizon_time: 1.0,
            lm_reg: 1e-4,
            tol: 1e-8,
            max_sqp_iter: 30,
            max_qp_iter: 100,
            gamma: 0.95,
            q_pos: 10.0,
            q_vel: 1.0,
            q_att: 1.0,
            r_thrust: 0.01,
            r_rate: 0.1,
            thrust_min_frac: 0.0,
            thrust_max_frac: 3.0,
            rate_limit: 12.0,
            strict_complementarity: 1e-6,
            tube: TubeConfig { rollouts: 500, horizon_steps: 125, safety: 1.1, seed: 4321, w_max_frac: 0.3 },
        }
    }
}

impl NmpcConfig {
    pub fn dt(&self) -> f64 {
        self.horizon_time / self.horizon as f64
    }
}

/// Fixed-final-time planar flip planner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlipConfig {
    /// Planner horizon steps and total maneuver time [s].
    pub horizon: usize,
    pub t_final: f64,
    /// Per-propeller thrust bounds available to the planner, as fractions of
    /// mg; tightened from the physical limits to leave margin for the
    /// ancillary controller.
    pub prop_min_frac: f64,
    pub prop_max_frac: f64,
    /// Bound on per-propeller thrust rate of change [N/s].
    pub thrust_rate_limit: f64,
    /// Planner stage weights (position, velocity, roll rate, thrust
    /// deviation) and input weight on thrust rates.
    pub q_pos: f64,
    pub q_vel: f64,
    pub q_rate: f64,
    pub q_thrust: f64,
    pub r_rate: f64,
}

impl Default for FlipConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            t_final: 2.5,
            prop_min_frac: 0.05,
            prop_max_frac: 0.60,
            thrust_rate_limit: 60.0,
            q_pos: 0.2,
            q_vel: 0.02,
            q_rate: 0.01,
            q_thrust: 0.01,
            r_rate: 0.01,
        }
    }
}

impl FlipConfig {
    pub fn dt(&self) -> f64 {
        self.t_final / self.horizon as f64
    }
}

/// MLP policy training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Epoch budget for the linear pipeline (no early stopping).
    pub linear_epochs: usize,
    /// Epoch cap, early-stop patience and validation split for the
    /// nonlinear pipeline.
    pub nonlinear_max_epochs: usize,
    pub patience: usize,
    pub val_split: f64,
    pub hidden_linear: Vec<usize>,
    pub hidden_flip: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            linear_epochs: 50,
            nonlinear_max_epochs: 400,
            patience: 30,
            val_split: 0.3,
            hidden_linear: vec![32, 32],
            hidden_flip: vec![64, 32],
            seed: 0,
        }
    }
}

/// Imitation-learning schedule and evaluation protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IlConfig {
    pub demos_per_batch: usize,
    pub n_batches: usize,
    pub eval_episodes: usize,
    pub n_seeds: usize,
    /// Episode length in controller steps.
    pub episode_steps: usize,
    /// Radius of the initial position/velocity randomization ball.
    pub init_ball: f64,
    /// Target-domain disturbance bounds as fractions of mg.
    pub t1_min_frac: f64,
    pub t1_max_frac: f64,
    /// Drag multiplier for the second target domain.
    pub t2_drag_scale: f64,
    pub flip_min_frac: f64,
    pub flip_max_frac: f64,
}

impl Default for IlConfig {
    fn default() -> Self {
        Self {
            demos_per_batch: 10,
            n_batches: 20,
            eval_episodes: 20,
            n_seeds: 3,
            episode_steps: 150,
            init_ball: 0.1,
            t1_min_frac: 0.25,
            t1_max_frac: 0.3,
            t2_drag_scale: 3.0,
            flip_min_frac: 0.001,
            flip_max_frac: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Config {
    pub sim: MultirotorParams,
    pub linear: LinearMpcConfig,
    pub nmpc: NmpcConfig,
    pub flip: FlipConfig,
    pub train: TrainConfig,
    pub il: IlConfig,
}

impl Default for MultirotorParams {
    fn default() -> Self {
        Self::defaults()
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, toml::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.sim;
        if s.mass <= 0.0 || s.inertia.iter().any(|v| *v <= 0.0) {
            return Err(ConfigError::Invalid("mass and inertia must be positive".into()));
        }
        if s.c_d1 < 0.0 || s.c_d2 < 0.0 || s.c_d3 < 0.0 {
            return Err(ConfigError::Invalid("drag coefficients must be nonnegative".into()));
        }
        if self.linear.horizon == 0 || self.nmpc.horizon == 0 || self.flip.horizon == 0 {
            return Err(ConfigError::Invalid("horizons must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.train.val_split) {
            return Err(ConfigError::Invalid("val_split must be in [0, 1)".into()));
        }
        if self.il.t1_min_frac > self.il.t1_max_frac || self.il.flip_min_frac > self.il.flip_max_frac {
            return Err(ConfigError::Invalid("disturbance fractions out of order".into()));
        }
        Ok(())
    }
}
