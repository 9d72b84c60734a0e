//! Experiment configuration and the per-run random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::QParams;
use crate::env::{EnvKind, EnvSpec};
use crate::oracle::DemoParams;
use crate::rrpo::{Betas, TrainConfig};

use super::DriverError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub horizon: usize,
    /// Length of the fragments preferences compare.
    pub fragment_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardModelConfig {
    Tabular,
    Mlp { hidden: Vec<usize> },
}

/// Optimizer and stopping knobs, without the encode-time flags that live at
/// the experiment level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub smooth_weight: f64,
    pub batch_max: usize,
    pub rel_tol: f64,
    pub consecutive_needed: usize,
    pub epoch_cap: usize,
    pub beta_demo: f64,
    pub beta_pref: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            smooth_weight: t.smooth_weight,
            batch_max: t.batch_max,
            rel_tol: t.rel_tol,
            consecutive_needed: t.consecutive_needed,
            epoch_cap: t.epoch_cap,
            beta_demo: 1.0,
            beta_pref: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn to_train_config(&self, split_mode: bool) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            smooth_weight: self.smooth_weight,
            batch_max: self.batch_max,
            rel_tol: self.rel_tol,
            consecutive_needed: self.consecutive_needed,
            epoch_cap: self.epoch_cap,
            split_mode,
            betas: Betas {
                demo: self.beta_demo,
                pref: self.beta_pref,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Environment steps each demonstration seed agent trains for.
    pub demo_train_steps: usize,
    pub demo_seed_agents: usize,
    pub demo_selected: usize,
    /// Draw the first fragment of each preference from new trajectories.
    pub first_from_new: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            demo_train_steps: 300 * 48,
            demo_seed_agents: 4,
            demo_selected: 4,
            first_from_new: true,
        }
    }
}

/// One experiment cell: environment, feedback budget, and every knob of the
/// modules the loop touches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub n_iters: usize,
    pub n_rollout_steps: usize,
    pub n_prefs: usize,
    pub n_pos_demos: usize,
    pub n_neg_demos: usize,
    pub use_rankings: bool,
    /// Split the demo ordering (no agent-vs-negative edges); the cliff
    /// exception, where agent behaviour can be as bad as negative demos.
    pub split_mode: bool,
    pub seeds: Vec<u64>,
    pub reward_model: RewardModelConfig,
    pub optimizer: OptimizerConfig,
    pub agent: QParams,
    pub oracle: OracleConfig,
    pub eval_rollouts: usize,
}

impl ExperimentConfig {
    /// Desk-scale cliff-walking defaults: horizon 48, 64 preferences plus 2
    /// positive demonstrations, 16 seeds, about 500 episodes of rollout.
    pub fn default_cliff() -> Self {
        Self {
            env: EnvConfig {
                kind: EnvKind::CliffWalking,
                horizon: 48,
                fragment_len: 16,
            },
            n_iters: 8,
            // 9 * 110 episodes of 48 steps; divisible so the floor is exact
            n_rollout_steps: 9 * 110 * 48,
            n_prefs: 64,
            n_pos_demos: 2,
            n_neg_demos: 0,
            use_rankings: true,
            split_mode: true,
            seeds: (0..16).collect(),
            reward_model: RewardModelConfig::Tabular,
            optimizer: OptimizerConfig::default(),
            agent: QParams::default(),
            oracle: OracleConfig::default(),
            eval_rollouts: 8,
        }
    }

    pub fn spec(&self) -> Result<EnvSpec, DriverError> {
        EnvSpec::new(self.env.kind, self.env.horizon).map_err(DriverError::from)
    }

    pub fn validate(&self) -> Result<(), DriverError> {
        if self.n_iters < 1 {
            return Err(DriverError::BadConfig("n_iters must be at least 1".into()));
        }
        if self.n_prefs == 0 && self.n_pos_demos == 0 && self.n_neg_demos == 0 {
            return Err(DriverError::BadConfig(
                "at least one feedback count must be positive".into(),
            ));
        }
        if self.env.fragment_len == 0 || self.env.fragment_len > self.env.horizon {
            return Err(DriverError::BadConfig(format!(
                "fragment length {} must be in 1..={}",
                self.env.fragment_len, self.env.horizon
            )));
        }
        if self.seeds.is_empty() {
            return Err(DriverError::BadConfig("seed list is empty".into()));
        }
        let per_iter = self.n_rollout_steps / (self.n_iters + 1);
        if per_iter < self.env.horizon {
            return Err(DriverError::BadConfig(format!(
                "rollout budget per iteration ({per_iter}) is below one horizon"
            )));
        }
        if self.eval_rollouts == 0 {
            return Err(DriverError::BadConfig("eval_rollouts must be positive".into()));
        }
        self.spec()?;
        Ok(())
    }

    pub fn demo_params(&self) -> DemoParams {
        DemoParams {
            train_steps: self.oracle.demo_train_steps,
            n_seed_agents: self.oracle.demo_seed_agents,
            n_selected: self.oracle.demo_selected,
            q: self.agent,
        }
    }
}

/// Named random streams, all derived from one root seed so module-level
/// reordering cannot perturb another module's draws.
pub struct RngStreams;

impl RngStreams {
    pub const ORACLE: u64 = 1;
    pub const AGENT: u64 = 2;
    pub const MODEL: u64 = 3;

    pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        rng
    }
}
