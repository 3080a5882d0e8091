//! Question answering over a bounded memory of sentences.

use rand::Rng;

use super::gae::{Trajectory, TrajectoryStep};
use super::loss::{cross_entropy, sum_scalars, StepVars};
use crate::basenets::{Attention, MemN2N};
use crate::error::{contract, Result};
use crate::memory::MemoryBuffer;
use crate::retention::{
    argmax, fifo_select, sample_action, PolicyInput, PolicyKind, RetentionNet, SampleMode, ShuffleView,
};
use crate::tasks::{QaEpisode, Vocab};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

pub const MEMN2N_HOPS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct QaAgent {
    pub reader: MemN2N,
    pub retention: RetentionNet,
    pub memory_size: usize,
}

/// One episode recorded on a tape.
#[derive(Debug)]
pub struct QaRun<'s> {
    pub graph: Graph<'s>,
    pub trajectory: Trajectory,
    pub steps: Vec<StepVars>,
    /// Summed answer cross-entropy.
    pub task_loss: Var,
    /// `(predicted, answer)` per question in stream order.
    pub answers: Vec<(usize, usize)>,
    pub retention_decisions: usize,
    /// One line per retention decision or question when tracing.
    pub trace: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Retention actually used; FIFO during pretraining.
    pub policy: PolicyKind,
    pub mode: SampleMode,
    pub trace: bool,
    /// Hop attention of the question-answering reader.
    pub attention: Attention,
}

impl RunOptions {
    /// Sampling run without tracing, softmax attention.
    pub fn new(policy: PolicyKind, mode: SampleMode) -> Self {
        Self {
            policy,
            mode,
            trace: false,
            attention: Attention::Softmax,
        }
    }
}

impl QaAgent {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab: usize,
        dim: usize,
        max_sentence: usize,
        memory_size: usize,
        policy: PolicyKind,
        shuffle: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let reader = MemN2N::new(store, "memn2n", vocab, dim, max_sentence, MEMN2N_HOPS, memory_size, rng)?;
        let retention = RetentionNet::new(store, "retention", policy, shuffle, dim, rng)?;
        Ok(Self {
            reader,
            retention,
            memory_size,
        })
    }

    pub fn task_params(&self) -> Result<Vec<ParamId>> {
        self.reader.param_ids()
    }

    pub fn run<'s, R: Rng + ?Sized>(
        &self,
        store: &'s ParamStore,
        episode: &QaEpisode,
        opts: RunOptions,
        vocab: Option<&Vocab>,
        rng: &mut R,
    ) -> Result<QaRun<'s>> {
        let mut g = Graph::new(store);
        let mut memory: MemoryBuffer<usize, Var> = MemoryBuffer::new(self.memory_size)?;
        let mut traj = Trajectory::default();
        let mut steps = Vec::new();
        let mut ce_terms = Vec::new();
        let mut answers = Vec::new();
        let mut decisions = 0;
        let mut trace = Vec::new();
        let render = |tokens: &[usize]| match vocab {
            Some(v) => v.decode(tokens),
            None => format!("{tokens:?}"),
        };
        let last = episode.len().saturating_sub(1);

        for (pos, item) in episode.items.iter().enumerate() {
            if let Some(q) = episode.question_at(pos) {
                if memory.is_empty() {
                    return Err(contract(format!("question at {pos} with an empty memory")));
                }
                let sentences: Vec<&[usize]> = memory.payloads().map(|&i| episode.items[i].as_slice()).collect();
                let (logits, read) = self.reader.answer(&mut g, item, &sentences, opts.attention)?;
                ce_terms.push(cross_entropy(&mut g, logits, q.answer)?);
                let predicted = argmax(g.value(logits).data());
                let value = if opts.policy == PolicyKind::Fifo {
                    g.scalar(0.0)
                } else {
                    let rows = self.reader.entry_repr(&mut g, &sentences)?;
                    self.retention.value_of(&mut g, rows)?
                };
                let reward = if predicted == q.answer { 1.0 } else { -1.0 };
                traj.steps.push(TrajectoryStep {
                    action: predicted,
                    log_prob: None,
                    value: g.value(value).item(),
                    reward,
                    done: pos == last,
                });
                steps.push(StepVars {
                    log_prob: None,
                    value,
                    entropy: None,
                });
                answers.push((predicted, q.answer));
                if opts.trace {
                    let attention = read
                        .attention
                        .last()
                        .map(|&a| g.value(a).data().to_vec())
                        .unwrap_or_default();
                    trace.push(format!(
                        "{pos}\tquestion\t{}\tpredicted={}\tanswer={}\tattention={}\tmemory={}",
                        render(item),
                        render(&[predicted]),
                        render(&[q.answer]),
                        join(&attention),
                        memory
                            .dump(|&i| render(&episode.items[i]))
                            .trim_end()
                            .replace('\n', " | ")
                    ));
                }
                continue;
            }

            if !memory.is_full() {
                memory.append(pos)?;
                continue;
            }

            decisions += 1;
            let mut sentences: Vec<&[usize]> = memory.payloads().map(|&i| episode.items[i].as_slice()).collect();
            sentences.push(item);
            let candidates = self.reader.entry_repr(&mut g, &sentences)?;
            let usage = memory.usages();
            let hidden: Vec<Option<Var>> = memory.hidden_states().into_iter().map(|h| h.copied()).collect();
            let out = match opts.policy {
                PolicyKind::Fifo => fifo_select(&mut g, memory.len())?,
                kind => {
                    if kind != self.retention.kind {
                        return Err(contract(format!(
                            "agent built for {} asked to run {kind}",
                            self.retention.kind
                        )));
                    }
                    let query = self.reader.embed_query(&mut g, item)?;
                    let hop_logits = if kind == PolicyKind::Im {
                        let read = self
                            .reader
                            .read(&mut g, query, &sentences[..memory.len()], opts.attention)?;
                        Some(self.reader.mean_hop_logits(&mut g, &read)?)
                    } else {
                        None
                    };
                    let view = (self.retention.shuffle && opts.mode == SampleMode::Sample)
                        .then(|| ShuffleView::random(memory.len(), rng));
                    let input = PolicyInput {
                        candidates,
                        query,
                        hop_logits,
                        usage: &usage,
                        hidden: &hidden,
                    };
                    self.retention.select(&mut g, &input, view.as_ref())?
                }
            };
            let action = sample_action(&out.probs, opts.mode, rng)?;
            let log_prob = g.index(out.log_probs, action)?;
            traj.steps.push(TrajectoryStep {
                action,
                log_prob: Some(g.value(log_prob).item()),
                value: g.value(out.value).item(),
                reward: 0.0,
                done: pos == last,
            });
            steps.push(StepVars {
                log_prob: Some(log_prob),
                value: out.value,
                entropy: Some(out.entropy),
            });
            if opts.trace {
                trace.push(format!(
                    "{pos}\tretain\t{}\tprobs={}\taction={action}\tmemory={}",
                    render(item),
                    join(&out.probs),
                    memory
                        .dump(|&i| render(&episode.items[i]))
                        .trim_end()
                        .replace('\n', " | ")
                ));
            }
            memory.commit_aux(out.new_usage.as_deref(), out.new_hidden)?;
            memory.replace_at(action, pos)?;
        }

        if let Some(s) = traj.steps.last_mut() {
            s.done = true;
        }
        let task_loss = sum_scalars(&mut g, &ce_terms)?;
        Ok(QaRun {
            graph: g,
            trajectory: traj,
            steps,
            task_loss,
            answers,
            retention_decisions: decisions,
            trace,
        })
    }
}

pub(crate) fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",")
}
