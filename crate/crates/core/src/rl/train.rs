use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Phase, SharedParams, TrainConfig};
use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::tensor::{Gradients, ParamStore, TensorError};

/// Unweighted loss components of one training episode.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub task_loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct Update {
    pub grads: Gradients,
    pub stats: StepStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// Breakdown key, such as a noise tier or corridor length.
    pub group: String,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Error rate for question answering, success rate for navigation.
    pub metric: f64,
    pub higher_is_better: bool,
    pub outcomes: Vec<Outcome>,
}

impl Evaluation {
    pub fn from_outcomes(outcomes: Vec<Outcome>, higher_is_better: bool) -> Self {
        let hits = outcomes.iter().filter(|o| o.success).count() as f64;
        let total = outcomes.len().max(1) as f64;
        let metric = if higher_is_better {
            hits / total
        } else {
            1.0 - hits / total
        };
        Self {
            metric,
            higher_is_better,
            outcomes,
        }
    }

    /// `(group, metric, count)` in first-seen group order.
    pub fn groups(&self) -> Vec<(String, f64, usize)> {
        let mut order: Vec<(String, usize, usize)> = Vec::new();
        for o in &self.outcomes {
            match order.iter_mut().find(|(g, _, _)| *g == o.group) {
                Some(entry) => {
                    entry.1 += o.success as usize;
                    entry.2 += 1;
                }
                None => order.push((o.group.clone(), o.success as usize, 1)),
            }
        }
        order
            .into_iter()
            .map(|(g, hits, n)| {
                let rate = hits as f64 / n as f64;
                (g, if self.higher_is_better { rate } else { 1.0 - rate }, n)
            })
            .collect()
    }

    pub fn is_better_than(&self, other: &Evaluation) -> bool {
        if self.higher_is_better {
            self.metric > other.metric
        } else {
            self.metric < other.metric
        }
    }
}

pub trait Experiment: Sync {
    /// Plays training episode `step` against `params` and returns its gradients.
    fn rollout(&self, params: &ParamStore, step: u64, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Update>;

    /// Greedy evaluation on the held-out set.
    fn evaluate(&self, params: &ParamStore) -> Result<Evaluation>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: Phase,
    pub stats: StepStats,
    pub eval_metric: Option<f64>,
}

pub trait TrainObserver {
    fn row(&mut self, row: &MetricsRow) -> Result<()>;

    fn evaluated(&mut self, _step: u64, _eval: &Evaluation, _params: &SharedParams) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for Vec<MetricsRow> {
    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Random stream of training episode `index`.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs training from `shared.version()` up to `cfg.total_steps`.
///
/// Each round, `cfg.workers` episodes roll out against the same parameter
/// snapshot; their gradients are then applied one at a time in episode order.
pub fn train<E: Experiment + ?Sized>(
    exp: &E,
    shared: &mut SharedParams,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    cfg.validate()?;
    let mut step = shared.version();
    while step < cfg.total_steps {
        let round = (cfg.workers as u64).min(cfg.total_steps - step);
        let base = step;
        let params = shared.store();
        let updates = map_indexed(round as usize, |k| {
            let index = base + k as u64;
            let mut rng = episode_rng(cfg.seed, index);
            exp.rollout(params, index, cfg, &mut rng)
        });
        for (k, update) in updates.into_iter().enumerate() {
            let index = base + k as u64;
            let mut update = update.map_err(|e| at_step(e, index))?;
            update.grads.clip_norm(cfg.max_grad_norm);
            shared.apply(&update.grads, cfg.lr).map_err(|e| at_step(e, index))?;
            let done = index + 1;
            let eval = if cfg.eval_every > 0 && (done.is_multiple_of(cfg.eval_every) || done == cfg.total_steps) {
                Some(exp.evaluate(shared.store()).map_err(|e| at_step(e, index))?)
            } else {
                None
            };
            observer.row(&MetricsRow {
                step: done,
                phase: cfg.phase(index),
                stats: update.stats,
                eval_metric: eval.as_ref().map(|e| e.metric),
            })?;
            if let Some(e) = &eval {
                observer.evaluated(done, e, shared)?;
            }
        }
        step += round;
    }
    Ok(())
}

/// Tags divergence with the step index; non-finite activations count as
/// divergence too.
fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::Divergence { detail, .. } => Error::Divergence { step, detail },
        Error::Tensor(t @ TensorError::Numeric { .. }) => Error::Divergence {
            step,
            detail: t.to_string(),
        },
        other => other,
    }
}

pub(crate) fn check_finite(stats: &StepStats, total: f64) -> Result<()> {
    let all = [
        total,
        stats.task_loss,
        stats.policy_loss,
        stats.value_loss,
        stats.entropy,
    ];
    if all.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            step: 0,
            detail: format!("non-finite loss {stats:?}"),
        })
    }
}
