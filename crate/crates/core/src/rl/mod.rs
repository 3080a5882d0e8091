//! Actor-critic training of the task networks and retention policies.

mod adam;
mod experiments;
mod gae;
mod loss;
mod maze_agent;
mod qa_agent;
mod train;

use std::fmt;

use crate::basenets::Attention;
use crate::error::{Error, Result};

pub use adam::{AdamConfig, SharedParams};
pub use experiments::{imaze_eval_set, random_maze_eval_set, MazeExperiment, MazeTask, QaExperiment};
pub use gae::{compute_gae, Advantages, Trajectory, TrajectoryStep};
pub use loss::{actor_critic_loss, cross_entropy, LossParts, LossWeights, StepVars};
pub use maze_agent::{MazeAgent, MazeRun};
pub use qa_agent::{QaAgent, QaRun, RunOptions, MEMN2N_HOPS};
pub use train::{episode_rng, train, Evaluation, Experiment, MetricsRow, Outcome, StepStats, TrainObserver, Update};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub lr: f64,
    /// Episodes, one gradient application each.
    pub total_steps: u64,
    /// Leading steps trained with FIFO retention.
    pub pretrain_steps: u64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub workers: usize,
    pub seed: u64,
    pub max_grad_norm: f64,
    /// Evaluate every this many steps; 0 disables periodic evaluation.
    pub eval_every: u64,
    /// Leading steps during which the reader attends linearly.
    pub linear_start_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.96,
            lr: 0.001,
            total_steps: 200_000,
            pretrain_steps: 50_000,
            entropy_coef: 0.01,
            value_coef: 0.5,
            workers: 4,
            seed: 0,
            max_grad_norm: 20.0,
            eval_every: 5_000,
            linear_start_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("discount and lambda must lie in [0, 1]");
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.pretrain_steps > self.total_steps {
            return bad("pretrain steps exceed total steps");
        }
        if self.workers == 0 {
            return bad("need at least one worker");
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return bad("gradient clip norm must be positive");
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return bad("loss coefficients must be non-negative");
        }
        Ok(())
    }

    pub fn phase(&self, step: u64) -> Phase {
        if step < self.pretrain_steps {
            Phase::Pretrain
        } else {
            Phase::Joint
        }
    }

    pub fn attention(&self, step: u64) -> Attention {
        if step < self.linear_start_steps {
            Attention::Linear
        } else {
            Attention::Softmax
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            value: self.value_coef,
            entropy: self.entropy_coef,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// FIFO retention, task network only.
    Pretrain,
    /// Learned retention trained jointly with the task network.
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pretrain => "pretrain",
            Self::Joint => "joint",
        })
    }
}
