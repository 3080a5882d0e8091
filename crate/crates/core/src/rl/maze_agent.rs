//! Navigation agents that keep a bounded memory of observations.

use rand::Rng;

use super::gae::{Trajectory, TrajectoryStep};
use super::loss::StepVars;
use super::qa_agent::{join, RunOptions};
use crate::basenets::{MazeArch, MazeNet, MAZE_ACTIONS};
use crate::error::Result;
use crate::memory::MemoryBuffer;
use crate::retention::{fifo_select, sample_action, PolicyInput, PolicyKind, RetentionNet, SampleMode, ShuffleView};
use crate::tasks::maze::{obs, MazeEnv, Observation};
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct MazeAgent {
    pub net: MazeNet,
    pub retention: RetentionNet,
    pub memory_size: usize,
}

#[derive(Debug)]
pub struct MazeRun<'s> {
    pub graph: Graph<'s>,
    pub trajectory: Trajectory,
    pub steps: Vec<StepVars>,
    pub success: bool,
    pub retention_decisions: usize,
    pub trace: Vec<String>,
}

impl MazeAgent {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        arch: MazeArch,
        dim: usize,
        memory_size: usize,
        policy: PolicyKind,
        shuffle: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            net: MazeNet::new(store, "maze", arch, obs::VOCAB, dim, rng)?,
            retention: RetentionNet::new(store, "retention", policy, shuffle, dim, rng)?,
            memory_size,
        })
    }

    /// Plays one episode from `env.reset()`. Each observation is written to
    /// memory before the agent reads and acts.
    pub fn run<'s, R: Rng + ?Sized>(
        &self,
        store: &'s ParamStore,
        env: &mut MazeEnv,
        opts: RunOptions,
        rng: &mut R,
    ) -> Result<MazeRun<'s>> {
        let mut g = Graph::new(store);
        let mut memory: MemoryBuffer<Observation, Var> = MemoryBuffer::new(self.memory_size)?;
        let mut traj = Trajectory::default();
        let mut steps = Vec::new();
        let mut decisions = 0;
        let mut trace = Vec::new();
        let mut ctx: Option<Var> = None;
        let mut observation = env.reset();
        let render = |o: &Observation| o.iter().map(|&t| obs::NAMES[t]).collect::<Vec<_>>().join(" ");

        loop {
            let t = env.steps();
            let mut log_prob = None;
            let mut entropy = None;
            if memory.is_full() {
                decisions += 1;
                let mut views: Vec<&[usize]> = memory.payloads().map(Vec::as_slice).collect();
                views.push(&observation);
                let candidates = self.net.memory_repr(&mut g, &views)?;
                let out = match opts.policy {
                    PolicyKind::Fifo => fifo_select(&mut g, memory.len())?,
                    _ => {
                        let query = self.net.embed_observation(&mut g, &observation)?;
                        let usage = memory.usages();
                        let hidden: Vec<Option<Var>> = memory.hidden_states().into_iter().map(|h| h.copied()).collect();
                        let view = (self.retention.shuffle && opts.mode == SampleMode::Sample)
                            .then(|| ShuffleView::random(memory.len(), rng));
                        let input = PolicyInput {
                            candidates,
                            query,
                            hop_logits: None,
                            usage: &usage,
                            hidden: &hidden,
                        };
                        self.retention.select(&mut g, &input, view.as_ref())?
                    }
                };
                let slot = sample_action(&out.probs, opts.mode, rng)?;
                let lp = g.index(out.log_probs, slot)?;
                if opts.trace {
                    trace.push(format!(
                        "{t}\tretain\t{}\tprobs={}\taction={slot}\tmemory={}",
                        render(&observation),
                        join(&out.probs),
                        memory.dump(render).trim_end().replace('\n', " | ")
                    ));
                }
                log_prob = Some(lp);
                entropy = Some(out.entropy);
                memory.commit_aux(out.new_usage.as_deref(), out.new_hidden)?;
                memory.replace_at(slot, observation.clone())?;
            } else {
                memory.append(observation.clone())?;
            }

            let views: Vec<&[usize]> = memory.payloads().map(Vec::as_slice).collect();
            let rows = self.net.memory_repr(&mut g, &views)?;
            let out = self.net.forward(&mut g, &observation, Some(rows), ctx)?;
            let nav_lp = g.log_softmax(out.action_logits)?;
            let p = g.exp(nav_lp);
            let probs = g.value(p).data().to_vec();
            debug_assert_eq!(probs.len(), MAZE_ACTIONS);
            let action = sample_action(&probs, opts.mode, rng)?;
            let chosen = g.index(nav_lp, action)?;
            let plogp = g.mul(p, nav_lp)?;
            let s = g.sum(plogp);
            let nav_entropy = g.neg(s);
            let log_prob = match log_prob {
                Some(r) => g.add(chosen, r)?,
                None => chosen,
            };
            let entropy = match entropy {
                Some(h) => g.add(nav_entropy, h)?,
                None => nav_entropy,
            };
            let step = env.step_index(action)?;
            traj.steps.push(TrajectoryStep {
                action,
                log_prob: Some(g.value(log_prob).item()),
                value: g.value(out.value).item(),
                reward: step.reward,
                done: step.done,
            });
            steps.push(StepVars {
                log_prob: Some(log_prob),
                value: out.value,
                entropy: Some(entropy),
            });
            ctx = Some(out.context);
            observation = step.observation;
            if step.done {
                return Ok(MazeRun {
                    graph: g,
                    trajectory: traj,
                    steps,
                    success: step.success,
                    retention_decisions: decisions,
                    trace,
                });
            }
        }
    }
}
