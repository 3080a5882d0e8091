use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::gae::{compute_gae, Trajectory};
use super::loss::{actor_critic_loss, StepVars};
use super::train::{check_finite, episode_rng, Evaluation, Experiment, Outcome, StepStats, Update};
use super::{MazeAgent, Phase, QaAgent, RunOptions, TrainConfig};
use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::retention::{PolicyKind, SampleMode};
use crate::tasks::maze::{imaze, imaze_env, random_maze, Color, MazeEnv, MazeSpec, MazeSplit, IMAZE_TRAIN_LENGTHS};
use crate::tasks::{QaEpisode, QaGenerator, QaVariant};
use crate::tensor::{Graph, ParamStore, Var};

fn policy_for(phase: Phase, kind: PolicyKind) -> PolicyKind {
    match phase {
        Phase::Pretrain => PolicyKind::Fifo,
        Phase::Joint => kind,
    }
}

/// Backpropagates the episode loss and packages the gradients.
fn finish(
    mut g: Graph<'_>,
    traj: &Trajectory,
    steps: &[StepVars],
    task: Option<Var>,
    supervised_only: bool,
    cfg: &TrainConfig,
) -> Result<Update> {
    let (total, stats) = match (supervised_only, task) {
        (true, Some(task)) => {
            let v = g.value(task).item();
            (
                task,
                StepStats {
                    task_loss: v,
                    ..StepStats::default()
                },
            )
        }
        _ => {
            let adv = compute_gae(traj, cfg.gamma, cfg.lambda)?;
            let parts = actor_critic_loss(&mut g, traj, &adv, steps, cfg.weights(), task)?;
            (
                parts.total,
                StepStats {
                    task_loss: parts.task,
                    policy_loss: parts.policy,
                    value_loss: parts.value,
                    entropy: parts.entropy,
                },
            )
        }
    };
    check_finite(&stats, g.value(total).item())?;
    if g.requires_grad(total) {
        g.backward(total)?;
    }
    Ok(Update {
        grads: g.gradients(),
        stats,
    })
}

/// Streaming question answering with a fixed held-out set.
#[derive(Debug, Clone)]
pub struct QaExperiment {
    pub agent: QaAgent,
    pub generator: QaGenerator,
    pub variant: QaVariant,
    /// Training episodes; generated per step when absent.
    pub train_pool: Option<Vec<QaEpisode>>,
    pub eval_set: Vec<QaEpisode>,
}

impl QaExperiment {
    fn training_episode(&self, rng: &mut ChaCha8Rng) -> Result<QaEpisode> {
        match &self.train_pool {
            Some(pool) => pool
                .choose(rng)
                .cloned()
                .ok_or_else(|| Error::Dataset("empty training set".into())),
            None => {
                let seed = rng.gen();
                self.generator.generate(self.variant, seed, rng)
            }
        }
    }

    /// Deterministic greedy run of one episode, as used in evaluation.
    pub fn answer_episode(&self, params: &ParamStore, episode: &QaEpisode) -> Result<Vec<(usize, usize)>> {
        let opts = RunOptions::new(self.agent.retention.kind, SampleMode::Argmax);
        let mut rng = episode_rng(episode.seed, 0);
        Ok(self.agent.run(params, episode, opts, None, &mut rng)?.answers)
    }
}

impl Experiment for QaExperiment {
    fn rollout(&self, params: &ParamStore, step: u64, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Update> {
        let phase = cfg.phase(step);
        let episode = self.training_episode(rng)?;
        let opts = RunOptions {
            attention: cfg.attention(step),
            ..RunOptions::new(policy_for(phase, self.agent.retention.kind), SampleMode::Sample)
        };
        let run = self.agent.run(params, &episode, opts, None, rng)?;
        finish(
            run.graph,
            &run.trajectory,
            &run.steps,
            Some(run.task_loss),
            phase == Phase::Pretrain,
            cfg,
        )
    }

    fn evaluate(&self, params: &ParamStore) -> Result<Evaluation> {
        let per_episode = map_indexed(self.eval_set.len(), |i| self.answer_episode(params, &self.eval_set[i]));
        let mut outcomes = Vec::new();
        for (ep, answers) in self.eval_set.iter().zip(per_episode) {
            let group = format!("noise={:.2}", ep.noise_rate);
            for (predicted, answer) in answers? {
                outcomes.push(Outcome {
                    group: group.clone(),
                    success: predicted == answer,
                });
            }
        }
        Ok(Evaluation::from_outcomes(outcomes, false))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MazeTask {
    /// Corridor mazes, trained on the standard lengths.
    IMaze,
    /// Random mazes with an indicator, trained on the small sizes.
    SingleInd,
}

/// `per_length` I-mazes for each corridor length, colors drawn from `seed`.
pub fn imaze_eval_set(lengths: &[usize], per_length: usize, seed: u64) -> Result<Vec<(String, MazeSpec)>> {
    let mut rng = episode_rng(seed, u64::MAX);
    let mut out = Vec::with_capacity(lengths.len() * per_length);
    for &len in lengths {
        for _ in 0..per_length {
            let color = *Color::ALL.choose(&mut rng).expect("two colors");
            out.push((format!("length={len}"), imaze(len, color)?));
        }
    }
    Ok(out)
}

pub fn random_maze_eval_set(split: MazeSplit, count: usize, seed: u64) -> Result<Vec<(String, MazeSpec)>> {
    let mut rng = episode_rng(seed, u64::MAX - 1);
    (0..count)
        .map(|_| {
            let size = rng.gen_range(split.sizes());
            Ok((format!("{split}:size={size}"), random_maze(size, &mut rng)?))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MazeExperiment {
    pub agent: MazeAgent,
    pub task: MazeTask,
    pub eval_set: Vec<(String, MazeSpec)>,
}

impl MazeExperiment {
    pub fn training_env(&self, rng: &mut ChaCha8Rng) -> Result<MazeEnv> {
        match self.task {
            MazeTask::IMaze => {
                let len = *IMAZE_TRAIN_LENGTHS.choose(rng).expect("lengths");
                imaze_env(len, rng)
            }
            MazeTask::SingleInd => crate::tasks::maze::random_maze_env(MazeSplit::Train, rng),
        }
    }

    pub fn evaluate_on(&self, params: &ParamStore, set: &[(String, MazeSpec)]) -> Result<Evaluation> {
        let results = map_indexed(set.len(), |i| -> Result<bool> {
            let mut env = MazeEnv::new(set[i].1.clone());
            let opts = RunOptions::new(self.agent.retention.kind, SampleMode::Argmax);
            let mut rng = episode_rng(i as u64, 0);
            Ok(self.agent.run(params, &mut env, opts, &mut rng)?.success)
        });
        let mut outcomes = Vec::with_capacity(set.len());
        for ((group, _), r) in set.iter().zip(results) {
            outcomes.push(Outcome {
                group: group.clone(),
                success: r?,
            });
        }
        Ok(Evaluation::from_outcomes(outcomes, true))
    }
}

impl Experiment for MazeExperiment {
    fn rollout(&self, params: &ParamStore, step: u64, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Update> {
        let phase = cfg.phase(step);
        let mut env = self.training_env(rng)?;
        let opts = RunOptions::new(policy_for(phase, self.agent.retention.kind), SampleMode::Sample);
        let run = self.agent.run(params, &mut env, opts, rng)?;
        finish(run.graph, &run.trajectory, &run.steps, None, false, cfg)
    }

    fn evaluate(&self, params: &ParamStore) -> Result<Evaluation> {
        self.evaluate_on(params, &self.eval_set)
    }
}
