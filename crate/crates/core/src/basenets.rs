//! Task networks that read the memory: a multi-hop MemN2N answerer and
//! MQN/FRMQN-style navigation agents.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::nn::{GruCell, HopRole, Linear, PositionEncoding, SentenceEncoder, INIT_SCALE};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Number of navigation actions: forward, turn left, turn right.
pub const MAZE_ACTIONS: usize = 3;

/// How hop attention turns logits into weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Attention {
    #[default]
    Softmax,
    /// Raw logits as weights, used early in training.
    Linear,
}

/// End-to-end memory network with adjacent weight tying and temporal
/// encoding by recency.
///
/// The question shares the first key table and the answer layer is the last
/// value table.
#[derive(Debug, Clone, PartialEq)]
pub struct MemN2N {
    pub encoder: SentenceEncoder,
    /// `hops + 1` tables `[max_memory x d]`, tied like the word tables.
    temporal: Vec<ParamId>,
    pub max_memory: usize,
}

/// Intermediate state of a multi-hop read.
#[derive(Debug, Clone)]
pub struct HopRead {
    /// Controller state after the last hop.
    pub u: Var,
    /// Pre-softmax attention logits per hop, each `[n]`.
    pub logits: Vec<Var>,
    /// Attention distributions per hop, each `[n]`.
    pub attention: Vec<Var>,
}

impl MemN2N {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        max_len: usize,
        hops: usize,
        max_memory: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hops == 0 || max_memory == 0 {
            return Err(Error::Config(
                "memory network needs at least one hop and one slot".into(),
            ));
        }
        let encoder = SentenceEncoder::new(
            store,
            &format!("{name}.embed"),
            vocab,
            dim,
            max_len,
            hops,
            PositionEncoding::MemN2N,
            rng,
        )?;
        let temporal = (0..=hops)
            .map(|k| store.add_uniform(format!("{name}.time{k}"), &[max_memory, dim], INIT_SCALE, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            encoder,
            temporal,
            max_memory,
        })
    }

    pub fn hops(&self) -> usize {
        self.encoder.hops()
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }

    /// Input embedding of a sentence (`psi`).
    pub fn embed_query(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        self.encoder.encode(g, tokens, HopRole::Query)
    }

    /// Entry representations used by retention policies (`phi`): the hop-1
    /// value embedding, one row per sentence.
    pub fn entry_repr(&self, g: &mut Graph, sentences: &[&[usize]]) -> Result<Var> {
        self.encoder.encode_rows(g, sentences, HopRole::Value(1))
    }

    fn memory_rows(&self, g: &mut Graph, sentences: &[&[usize]], table: usize) -> Result<Var> {
        let role = if table == 0 {
            HopRole::Key(1)
        } else {
            HopRole::Value(table)
        };
        let words = self.encoder.encode_rows(g, sentences, role)?;
        let n = sentences.len();
        if n > self.max_memory {
            return Err(contract(format!(
                "{n} entries exceed the temporal table of {}",
                self.max_memory
            )));
        }
        let t = g.param(self.temporal[table]);
        let ranks = (0..n).map(|i| vec![n - 1 - i]).collect();
        let ones = vec![vec![1.0; self.dim()]; n];
        let time = g.embed_rows(t, ranks, ones)?;
        Ok(g.add(words, time)?)
    }

    /// Runs every hop from controller state `u` over `sentences` (oldest first).
    pub fn read(&self, g: &mut Graph, u: Var, sentences: &[&[usize]], attention_mode: Attention) -> Result<HopRead> {
        if sentences.is_empty() {
            return Err(contract("memory network read over an empty memory"));
        }
        let mut u = u;
        let mut logits = Vec::with_capacity(self.hops());
        let mut attention = Vec::with_capacity(self.hops());
        let mut keys = self.memory_rows(g, sentences, 0)?;
        for k in 1..=self.hops() {
            let values = self.memory_rows(g, sentences, k)?;
            let z = g.matvec(keys, u)?;
            let p = match attention_mode {
                Attention::Softmax => g.softmax(z)?,
                Attention::Linear => z,
            };
            let o = g.vecmat(p, values)?;
            u = g.add(u, o)?;
            logits.push(z);
            attention.push(p);
            keys = values;
        }
        Ok(HopRead { u, logits, attention })
    }

    /// Answer logits over the vocabulary for `question`.
    pub fn answer(
        &self,
        g: &mut Graph,
        question: &[usize],
        sentences: &[&[usize]],
        attention_mode: Attention,
    ) -> Result<(Var, HopRead)> {
        let u = self.embed_query(g, question)?;
        let read = self.read(g, u, sentences, attention_mode)?;
        let w = g.param(self.encoder.table(HopRole::Value(self.hops()))?);
        let logits = g.matvec(w, read.u)?;
        Ok((logits, read))
    }

    /// Mean of the per-hop attention logits, `[n]`.
    pub fn mean_hop_logits(&self, g: &mut Graph, read: &HopRead) -> Result<Var> {
        let mut acc = read.logits[0];
        for &z in &read.logits[1..] {
            acc = g.add(acc, z)?;
        }
        Ok(g.scale(acc, 1.0 / read.logits.len() as f64))
    }

    pub fn param_ids(&self) -> Result<Vec<ParamId>> {
        let mut ids = Vec::new();
        for k in 0..=self.hops() {
            ids.push(if k == 0 {
                self.encoder.table(HopRole::Key(1))?
            } else {
                self.encoder.table(HopRole::Value(k))?
            });
        }
        ids.extend(&self.temporal);
        Ok(ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MazeArch {
    /// Context is the current observation embedding.
    Mqn,
    /// Context is a GRU over observation embeddings.
    Frmqn,
}

impl fmt::Display for MazeArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mqn => "mqn",
            Self::Frmqn => "frmqn",
        })
    }
}

impl FromStr for MazeArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mqn" => Ok(Self::Mqn),
            "frmqn" => Ok(Self::Frmqn),
            other => Err(Error::Config(format!("unknown maze network {other:?}"))),
        }
    }
}

/// Navigation agent reading a memory of past observations.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeNet {
    pub arch: MazeArch,
    pub dim: usize,
    pub obs_vocab: usize,
    pub context_table: ParamId,
    pub memory_table: ParamId,
    pub recurrent: Option<GruCell>,
    pub key: Linear,
    pub value: Linear,
    pub hidden: Linear,
    pub policy: Linear,
    pub critic: Linear,
}

#[derive(Debug, Clone)]
pub struct MazeOutput {
    /// `[3]`
    pub action_logits: Var,
    pub value: Var,
    /// Context for the next step (the observation embedding for MQN).
    pub context: Var,
    /// Attention over memory entries, absent for an empty memory.
    pub attention: Option<Var>,
}

impl MazeNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        arch: MazeArch,
        obs_vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            arch,
            dim,
            obs_vocab,
            context_table: store.add_uniform(format!("{name}.context"), &[obs_vocab, dim], INIT_SCALE, rng)?,
            memory_table: store.add_uniform(format!("{name}.memory"), &[obs_vocab, dim], INIT_SCALE, rng)?,
            recurrent: match arch {
                MazeArch::Mqn => None,
                MazeArch::Frmqn => Some(GruCell::new(store, &format!("{name}.recurrent"), dim, dim, rng)?),
            },
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            hidden: Linear::new(store, &format!("{name}.hidden"), 2 * dim, dim, rng)?,
            policy: Linear::new(store, &format!("{name}.policy"), dim, MAZE_ACTIONS, rng)?,
            critic: Linear::new(store, &format!("{name}.critic"), dim, 1, rng)?,
        })
    }

    fn bag(&self, g: &mut Graph, table: ParamId, observations: &[&[usize]]) -> Result<Var> {
        if observations.is_empty() || observations.iter().any(|o| o.is_empty()) {
            return Err(contract("empty observation"));
        }
        if let Some(&token) = observations
            .iter()
            .flat_map(|o| o.iter())
            .find(|&&t| t >= self.obs_vocab)
        {
            return Err(Error::Vocabulary {
                token,
                vocab: self.obs_vocab,
            });
        }
        let t = g.param(table);
        let tokens = observations.iter().map(|o| o.to_vec()).collect();
        let weights = observations.iter().map(|o| vec![1.0; o.len() * self.dim]).collect();
        Ok(g.embed_rows(t, tokens, weights)?)
    }

    /// Observation embedding used as the retention query (`psi`), `[d]`.
    pub fn embed_observation(&self, g: &mut Graph, obs: &[usize]) -> Result<Var> {
        let rows = self.bag(g, self.context_table, &[obs])?;
        Ok(g.reshape(rows, &[self.dim])?)
    }

    /// Memory entry representations (`phi`), `[n x d]`.
    pub fn memory_repr(&self, g: &mut Graph, observations: &[&[usize]]) -> Result<Var> {
        self.bag(g, self.memory_table, observations)
    }

    pub fn zero_context(&self, g: &mut Graph) -> Var {
        g.constant(Tensor::zeros(&[self.dim]))
    }

    /// One decision step. `memory` holds representations from
    /// [`MazeNet::memory_repr`] and may be absent (empty memory).
    pub fn forward(
        &self,
        g: &mut Graph,
        obs: &[usize],
        memory: Option<Var>,
        ctx_prev: Option<Var>,
    ) -> Result<MazeOutput> {
        let x = self.embed_observation(g, obs)?;
        let context = match &self.recurrent {
            None => x,
            Some(cell) => {
                let h = match ctx_prev {
                    Some(h) => h,
                    None => self.zero_context(g),
                };
                cell.step(g, x, h)?
            }
        };
        let (read, attention) = match memory {
            None => (self.zero_context(g), None),
            Some(m) => {
                let keys = self.key.forward_rows(g, m)?;
                let values = self.value.forward_rows(g, m)?;
                let z = g.matvec(keys, context)?;
                let p = g.softmax(z)?;
                (g.vecmat(p, values)?, Some(p))
            }
        };
        let both = g.concat(&[context, read])?;
        let h = self.hidden.forward(g, both)?;
        let h = g.relu(h);
        let action_logits = self.policy.forward(g, h)?;
        let v = self.critic.forward(g, h)?;
        let value = g.reshape(v, &[])?;
        Ok(MazeOutput {
            action_logits,
            value,
            context,
            attention,
        })
    }
}
