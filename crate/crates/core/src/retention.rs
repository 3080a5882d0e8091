//! Retention policies choosing which of `N + 1` candidates to drop when the
//! memory is full. Slot `N` is the incoming item itself (no write).

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::nn::{bigru_rows, GruCell, Linear, INIT_SCALE};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Weight of the previous usage in the moving average.
pub const USAGE_DECAY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Fifo,
    Im,
    S,
    St,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [Self::Fifo, Self::Im, Self::S, Self::St];

    pub fn is_learned(self) -> bool {
        self != Self::Fifo
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Fifo => "fifo",
            Self::Im => "im",
            Self::S => "s",
            Self::St => "st",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fifo" => Ok(Self::Fifo),
            "im" | "im-lemn" => Ok(Self::Im),
            "s" | "s-lemn" => Ok(Self::S),
            "st" | "st-lemn" => Ok(Self::St),
            other => Err(Error::Config(format!("unknown policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Sample,
    Argmax,
}

/// What a policy sees at one decision.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    /// `[(N + 1) x d]`: memory entries in order, then the incoming item.
    pub candidates: Var,
    /// Input embedding `c_t`, `[d]`.
    pub query: Var,
    /// Per-entry similarity logits `[N]`; dot products with `query` when absent.
    pub hop_logits: Option<Var>,
    pub usage: &'a [f64],
    /// Temporal states per entry; `None` is the zero state.
    pub hidden: &'a [Option<Var>],
}

#[derive(Debug, Clone)]
pub struct PolicyOutput {
    /// `[N + 1]`
    pub logits: Var,
    pub log_probs: Var,
    pub probs: Vec<f64>,
    pub value: Var,
    pub entropy: Var,
    pub new_usage: Option<Vec<f64>>,
    pub new_hidden: Option<Vec<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
struct InputMatching {
    gamma: Linear,
    nop: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Spatial {
    fw: GruCell,
    bw: GruCell,
    feature: Linear,
    hidden: Option<Linear>,
    temporal: Option<GruCell>,
    logit: Linear,
}

/// Two-layer value head over mean-pooled features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Critic {
    pub hidden: Linear,
    pub out: Linear,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        let q = (dim / 4).max(1);
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), dim, q, rng)?,
            out: Linear::new(store, &format!("{name}.out"), q, 1, rng)?,
        })
    }

    /// `features[n x d] -> scalar`
    pub fn forward(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let pooled = mean_rows(g, features)?;
        let h = self.hidden.forward(g, pooled)?;
        let h = g.relu(h);
        let v = self.out.forward(g, h)?;
        Ok(g.reshape(v, &[])?)
    }
}

/// Column means of a matrix.
pub fn mean_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.value(x).shape()[0];
    let w = g.constant(Tensor::full(&[n], 1.0 / n as f64));
    Ok(g.vecmat(w, x)?)
}

/// Retention policy parameters for one of the four mechanisms.
#[derive(Debug, Clone, PartialEq)]
pub struct RetentionNet {
    pub kind: PolicyKind,
    pub shuffle: bool,
    pub dim: usize,
    im: Option<InputMatching>,
    spatial: Option<Spatial>,
    critic: Option<Critic>,
}

impl RetentionNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: PolicyKind,
        shuffle: bool,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if shuffle && !matches!(kind, PolicyKind::S | PolicyKind::St) {
            return Err(Error::Config(format!(
                "shuffling is only defined for s and st, not {kind}"
            )));
        }
        let q = (dim / 4).max(1);
        let mut net = Self {
            kind,
            shuffle,
            dim,
            im: None,
            spatial: None,
            critic: None,
        };
        match kind {
            PolicyKind::Fifo => return Ok(net),
            PolicyKind::Im => {
                net.im = Some(InputMatching {
                    gamma: Linear::new(store, &format!("{name}.gamma"), dim, 1, rng)?,
                    nop: store.add_uniform(format!("{name}.nop"), &[1], INIT_SCALE, rng)?,
                });
            }
            PolicyKind::S | PolicyKind::St => {
                let st = kind == PolicyKind::St;
                net.spatial = Some(Spatial {
                    fw: GruCell::new(store, &format!("{name}.fw"), dim, dim, rng)?,
                    bw: GruCell::new(store, &format!("{name}.bw"), dim, dim, rng)?,
                    feature: Linear::new(store, &format!("{name}.feature"), 2 * dim, dim, rng)?,
                    hidden: if st {
                        None
                    } else {
                        Some(Linear::new(store, &format!("{name}.hidden"), dim, q, rng)?)
                    },
                    temporal: if st {
                        Some(GruCell::new(store, &format!("{name}.temporal"), dim, q, rng)?)
                    } else {
                        None
                    },
                    logit: Linear::new(store, &format!("{name}.logit"), q, 1, rng)?,
                });
            }
        }
        net.critic = Some(Critic::new(store, &format!("{name}.critic"), dim, rng)?);
        Ok(net)
    }

    /// Width of the temporal state (ST only).
    pub fn temporal_dim(&self) -> usize {
        (self.dim / 4).max(1)
    }

    /// Parameters owned by this policy, including its critic.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let lin = |l: &Linear, ids: &mut Vec<ParamId>| ids.extend([l.w, l.b]);
        let gru = |c: &GruCell, ids: &mut Vec<ParamId>| ids.extend([c.w_ih, c.w_hh, c.bias]);
        if let Some(im) = &self.im {
            lin(&im.gamma, &mut ids);
            ids.push(im.nop);
        }
        if let Some(s) = &self.spatial {
            gru(&s.fw, &mut ids);
            gru(&s.bw, &mut ids);
            lin(&s.feature, &mut ids);
            if let Some(h) = &s.hidden {
                lin(h, &mut ids);
            }
            if let Some(t) = &s.temporal {
                gru(t, &mut ids);
            }
            lin(&s.logit, &mut ids);
        }
        if let Some(c) = &self.critic {
            lin(&c.hidden, &mut ids);
            lin(&c.out, &mut ids);
        }
        ids
    }

    /// Evaluates the policy on `input`, optionally on a shuffled view of the
    /// memory entries. Outputs are always in the original slot order.
    pub fn select(&self, g: &mut Graph, input: &PolicyInput, view: Option<&ShuffleView>) -> Result<PolicyOutput> {
        let n = input.usage.len();
        let shape = g.value(input.candidates).shape().to_vec();
        if shape.len() != 2 || shape[0] != n + 1 || input.hidden.len() != n {
            return Err(contract(format!(
                "policy input of shape {shape:?} with {n} usage and {} hidden entries",
                input.hidden.len()
            )));
        }
        match self.kind {
            PolicyKind::Fifo => fifo_select(g, n),
            PolicyKind::Im => self.im_select(g, input),
            PolicyKind::S | PolicyKind::St => match view {
                Some(v) if !v.is_identity() => {
                    let permuted = v.permute_input(g, input)?;
                    let hidden: Vec<Option<Var>> = v.perm.iter().map(|&i| input.hidden[i]).collect();
                    let usage: Vec<f64> = v.perm.iter().map(|&i| input.usage[i]).collect();
                    let out = self.spatial_select(
                        g,
                        &PolicyInput {
                            candidates: permuted,
                            hidden: &hidden,
                            usage: &usage,
                            ..*input
                        },
                    )?;
                    v.restore_output(g, out)
                }
                _ => self.spatial_select(g, input),
            },
        }
    }

    fn im_select(&self, g: &mut Graph, input: &PolicyInput) -> Result<PolicyOutput> {
        let im = self
            .im
            .as_ref()
            .ok_or_else(|| contract("input-matching parameters missing"))?;
        let n = input.usage.len();
        let entries = g.slice(input.candidates, 0, n)?;
        let z = match input.hop_logits {
            Some(z) => z,
            None => g.matvec(entries, input.query)?,
        };
        if g.value(z).shape() != [n] {
            return Err(contract(format!(
                "similarity logits of shape {:?} for {n} entries",
                g.value(z).shape()
            )));
        }
        let new_usage = g
            .value(z)
            .data()
            .iter()
            .zip(input.usage)
            .map(|(zi, vi)| USAGE_DECAY * vi + (1.0 - USAGE_DECAY) * zi)
            .collect();
        let gamma = im.gamma.forward(g, input.query)?;
        let gamma = g.sigmoid(gamma);
        let gamma = g.reshape(gamma, &[])?;
        let v_prev = g.constant(Tensor::vector(input.usage.to_vec()));
        let decay = g.mul(gamma, v_prev)?;
        let mem_logits = g.sub(z, decay)?;
        let nop = g.param(im.nop);
        let logits = g.concat(&[mem_logits, nop])?;
        let value = self.critic_value(g, input.candidates)?;
        let mut out = finish(g, logits, value)?;
        out.new_usage = Some(new_usage);
        Ok(out)
    }

    /// Per-candidate features `relu(W_f [fw_i | bw_i] + b_f)`, `[(N + 1) x d]`.
    pub fn spatial_features(&self, g: &mut Graph, candidates: Var) -> Result<Var> {
        let s = self
            .spatial
            .as_ref()
            .ok_or_else(|| contract("spatial parameters missing"))?;
        let both = bigru_rows(g, &s.fw, &s.bw, candidates)?;
        let f = s.feature.forward_rows(g, both)?;
        Ok(g.relu(f))
    }

    fn spatial_select(&self, g: &mut Graph, input: &PolicyInput) -> Result<PolicyOutput> {
        let s = self
            .spatial
            .as_ref()
            .ok_or_else(|| contract("spatial parameters missing"))?;
        let n = input.usage.len();
        let f = self.spatial_features(g, input.candidates)?;
        let (h, new_hidden) = match (&s.hidden, &s.temporal) {
            (Some(lin), _) => (lin.forward_rows(g, f)?, None),
            (None, Some(cell)) => {
                let zero = g.constant(Tensor::zeros(&[cell.hidden]));
                let mut rows: Vec<Var> = input.hidden.iter().map(|h| h.unwrap_or(zero)).collect();
                rows.push(zero);
                let prev = g.stack_rows(&rows)?;
                let h = cell.step_rows(g, f, prev)?;
                let kept = (0..n)
                    .map(|i| g.row(h, i))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                (h, Some(kept))
            }
            (None, None) => return Err(contract("spatial policy without a hidden stage")),
        };
        let logits = s.logit.forward_rows(g, h)?;
        let logits = g.reshape(logits, &[n + 1])?;
        let value = self.critic_value(g, f)?;
        let mut out = finish(g, logits, value)?;
        out.new_hidden = new_hidden;
        Ok(out)
    }

    /// Critic over the features this policy computes for `candidates`
    /// (`[n x d]`, any `n >= 1`). FIFO has no critic and returns 0.
    pub fn value_of(&self, g: &mut Graph, candidates: Var) -> Result<Var> {
        match self.kind {
            PolicyKind::Fifo => Ok(g.scalar(0.0)),
            PolicyKind::Im => self.critic_value(g, candidates),
            PolicyKind::S | PolicyKind::St => {
                let f = self.spatial_features(g, candidates)?;
                self.critic_value(g, f)
            }
        }
    }

    fn critic_value(&self, g: &mut Graph, features: Var) -> Result<Var> {
        match &self.critic {
            Some(c) => c.forward(g, features),
            None => Ok(g.scalar(0.0)),
        }
    }
}

/// Deterministic choice of the oldest entry.
pub fn fifo_select(g: &mut Graph, n: usize) -> Result<PolicyOutput> {
    if n == 0 {
        return Err(contract("retention decision over an empty memory"));
    }
    let mut probs = vec![0.0; n + 1];
    probs[0] = 1.0;
    // exp(-1e300) underflows to 0, so these logits are also the log-probs.
    let logits = g.constant(Tensor::vector(
        probs.iter().map(|&p| if p > 0.0 { 0.0 } else { -1e300 }).collect(),
    ));
    Ok(PolicyOutput {
        logits,
        log_probs: logits,
        probs,
        value: g.scalar(0.0),
        entropy: g.scalar(0.0),
        new_usage: None,
        new_hidden: None,
    })
}

fn finish(g: &mut Graph, logits: Var, value: Var) -> Result<PolicyOutput> {
    let log_probs = g.log_softmax(logits)?;
    let p = g.exp(log_probs);
    let probs = g.value(p).data().to_vec();
    let plogp = g.mul(p, log_probs)?;
    let s = g.sum(plogp);
    let entropy = g.neg(s);
    Ok(PolicyOutput {
        logits,
        log_probs,
        probs,
        value,
        entropy,
        new_usage: None,
        new_hidden: None,
    })
}

/// Picks a slot: a categorical draw in training, the first maximum in
/// evaluation.
pub fn sample_action<R: Rng + ?Sized>(probs: &[f64], mode: SampleMode, rng: &mut R) -> Result<usize> {
    let total: f64 = probs.iter().sum();
    if probs.is_empty() || (total - 1.0).abs() > 1e-6 || probs.iter().any(|p| p.is_nan() || *p < 0.0) {
        return Err(contract(format!("not a probability vector (sum {total})")));
    }
    match mode {
        SampleMode::Argmax => Ok(argmax(probs)),
        SampleMode::Sample => {
            let dist = WeightedIndex::new(probs).map_err(|e| contract(e.to_string()))?;
            Ok(dist.sample(rng))
        }
    }
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Random reordering of the `N` memory entries; the incoming slot stays last.
///
/// Row `j` of the view is original entry `perm[j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShuffleView {
    pub perm: Vec<usize>,
}

impl ShuffleView {
    pub fn identity(n: usize) -> Self {
        Self { perm: (0..n).collect() }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        Self { perm }
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(j, &i)| i == j)
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (j, &i) in self.perm.iter().enumerate() {
            inv[i] = j;
        }
        inv
    }

    /// Maps a slot chosen on the view back to the original memory.
    pub fn to_original(&self, slot: usize) -> usize {
        self.perm.get(slot).copied().unwrap_or(slot)
    }

    fn permute_input(&self, g: &mut Graph, input: &PolicyInput) -> Result<Var> {
        let n = self.perm.len();
        let mut rows = Vec::with_capacity(n + 1);
        for &i in &self.perm {
            rows.push(g.row(input.candidates, i)?);
        }
        rows.push(g.row(input.candidates, n)?);
        Ok(g.stack_rows(&rows)?)
    }

    fn restore_output(&self, g: &mut Graph, out: PolicyOutput) -> Result<PolicyOutput> {
        let n = self.perm.len();
        let inv = self.inverse();
        let mut order: Vec<usize> = inv.clone();
        order.push(n);
        let gather = |g: &mut Graph, v: Var| -> Result<Var> {
            let parts = order
                .iter()
                .map(|&j| g.index(v, j))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(g.concat(&parts)?)
        };
        let logits = gather(g, out.logits)?;
        let log_probs = gather(g, out.log_probs)?;
        let probs = order.iter().map(|&j| out.probs[j]).collect();
        let new_hidden = out.new_hidden.map(|h| inv.iter().map(|&j| h[j]).collect());
        let new_usage = out.new_usage.map(|u| inv.iter().map(|&j| u[j]).collect());
        Ok(PolicyOutput {
            logits,
            log_probs,
            probs,
            new_usage,
            new_hidden,
            ..out
        })
    }
}

#[cfg(test)]
mod tests;
