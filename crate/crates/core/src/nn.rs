//! Layers shared by the retention policies and the task networks.

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

/// Default half-width of the uniform parameter initialization.
pub const INIT_SCALE: f64 = 0.1;

/// Affine map `W x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.w"), &[outputs, inputs], INIT_SCALE, rng)?;
        let b = store.add_uniform(format!("{name}.b"), &[outputs], INIT_SCALE, rng)?;
        Ok(Self { w, b, inputs, outputs })
    }

    /// `x[in] -> [out]`
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matvec(w, x)?;
        Ok(g.add(y, b)?)
    }

    /// `x[n x in] -> [n x out]`
    pub fn forward_rows(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul_nt(x, w)?;
        Ok(g.add_row(y, b)?)
    }
}

/// Gated recurrent unit with update, reset and candidate blocks stacked in
/// `w_ih[3h x in]`, `w_hh[3h x h]` and `bias[3h]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_ih = store.add_uniform(format!("{name}.w_ih"), &[3 * hidden, inputs], INIT_SCALE, rng)?;
        let w_hh = store.add_uniform(format!("{name}.w_hh"), &[3 * hidden, hidden], INIT_SCALE, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[3 * hidden], INIT_SCALE, rng)?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            inputs,
            hidden,
        })
    }

    /// One step for a single input: `x[in]`, `h[hidden]`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let (wi, wh, b) = (g.param(self.w_ih), g.param(self.w_hh), g.param(self.bias));
        Ok(g.gru(x, h, wi, wh, b)?)
    }

    /// One step for every row independently: `x[n x in]`, `h[n x hidden]`.
    pub fn step_rows(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        self.step(g, x, h)
    }

    pub fn zero_state(&self, g: &mut Graph) -> Var {
        g.constant(Tensor::zeros(&[self.hidden]))
    }
}

/// Runs `fw` left to right and `bw` right to left over `seq`, both from a zero
/// state. Element `i` of the result pairs the two states at position `i`.
pub fn bigru_forward(g: &mut Graph, fw: &GruCell, bw: &GruCell, seq: &[Var]) -> Result<Vec<(Var, Var)>> {
    if seq.is_empty() {
        return Err(contract("bidirectional GRU over an empty sequence"));
    }
    let mut forward = Vec::with_capacity(seq.len());
    let mut h = fw.zero_state(g);
    for &x in seq {
        h = fw.step(g, x, h)?;
        forward.push(h);
    }
    let mut backward = vec![h; seq.len()];
    let mut h = bw.zero_state(g);
    for (i, &x) in seq.iter().enumerate().rev() {
        h = bw.step(g, x, h)?;
        backward[i] = h;
    }
    Ok(forward.into_iter().zip(backward).collect())
}

/// Matrix form of [`bigru_forward`]: `x[n x in]` gives `[n x 2h]` rows
/// `[fw_i | bw_i]`.
pub fn bigru_rows(g: &mut Graph, fw: &GruCell, bw: &GruCell, x: Var) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(TensorError::Shape {
            op: "bigru_rows",
            left: shape,
            right: vec![fw.inputs],
        }
        .into());
    }
    let seq = (0..shape[0])
        .map(|i| g.row(x, i))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let pairs = bigru_forward(g, fw, bw, &seq)?;
    let (f, b): (Vec<Var>, Vec<Var>) = pairs.into_iter().unzip();
    let f = g.stack_rows(&f)?;
    let b = g.stack_rows(&b)?;
    Ok(g.concat_cols(f, b)?)
}

/// Per-position word weighting used when summing word embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionEncoding {
    /// `l_kj = (1 - j/J) - (k/d)(1 - 2j/J)` with 1-based `j` (position) and
    /// `k` (embedding coordinate), `J` the sentence length.
    MemN2N,
    /// All weights one.
    BagOfWords,
}

impl PositionEncoding {
    /// Weights for a sentence of `len` words, row-major `len x dim`.
    pub fn weights(self, len: usize, dim: usize) -> Vec<f64> {
        match self {
            Self::BagOfWords => vec![1.0; len * dim],
            Self::MemN2N => {
                let big_j = len as f64;
                let d = dim as f64;
                let mut w = Vec::with_capacity(len * dim);
                for j in 1..=len {
                    let jf = j as f64;
                    for k in 1..=dim {
                        let kf = k as f64;
                        w.push((1.0 - jf / big_j) - (kf / d) * (1.0 - 2.0 * jf / big_j));
                    }
                }
                w
            }
        }
    }
}

/// Which embedding of a multi-hop reader a sentence is encoded with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HopRole {
    Query,
    /// Attention keys of hop `k` (1-based).
    Key(usize),
    /// Read values of hop `k` (1-based).
    Value(usize),
}

/// Position-encoded bag-of-embeddings sentence encoder.
///
/// Hop tables follow adjacent tying: `Value(k)` and `Key(k + 1)` name the same
/// parameter and the query shares the first key table, so there are `hops + 1`
/// tables in total.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEncoder {
    pub dim: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub encoding: PositionEncoding,
    hop_tables: Vec<ParamId>,
}

impl SentenceEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        max_len: usize,
        hops: usize,
        encoding: PositionEncoding,
        rng: &mut R,
    ) -> Result<Self> {
        if hops == 0 {
            return Err(Error::Config("sentence encoder needs at least one hop".into()));
        }
        let hop_tables = (0..=hops)
            .map(|k| store.add_uniform(format!("{name}.hop{k}"), &[vocab, dim], INIT_SCALE, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            dim,
            vocab,
            max_len,
            encoding,
            hop_tables,
        })
    }

    pub fn hops(&self) -> usize {
        self.hop_tables.len() - 1
    }

    pub fn table(&self, role: HopRole) -> Result<ParamId> {
        let hops = self.hops();
        match role {
            HopRole::Query => Ok(self.hop_tables[0]),
            HopRole::Key(k) if (1..=hops).contains(&k) => Ok(self.hop_tables[k - 1]),
            HopRole::Value(k) if (1..=hops).contains(&k) => Ok(self.hop_tables[k]),
            other => Err(contract(format!("{other:?} outside 1..={hops} hops"))),
        }
    }

    pub fn validate(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(contract("cannot encode an empty sentence"));
        }
        if tokens.len() > self.max_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.max_len,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::Vocabulary {
                token,
                vocab: self.vocab,
            });
        }
        Ok(())
    }

    /// `sum_j PE_j * Embed_role(token_j)` as a `[dim]` vector.
    pub fn encode(&self, g: &mut Graph, tokens: &[usize], role: HopRole) -> Result<Var> {
        let rows = self.encode_rows(g, &[tokens], role)?;
        Ok(g.reshape(rows, &[self.dim])?)
    }

    /// One encoded sentence per row, `[n x dim]`.
    pub fn encode_rows(&self, g: &mut Graph, sentences: &[&[usize]], role: HopRole) -> Result<Var> {
        if sentences.is_empty() {
            return Err(contract("no sentences to encode"));
        }
        for s in sentences {
            self.validate(s)?;
        }
        let table = g.param(self.table(role)?);
        let tokens: Vec<Vec<usize>> = sentences.iter().map(|s| s.to_vec()).collect();
        let weights = sentences
            .iter()
            .map(|s| self.encoding.weights(s.len(), self.dim))
            .collect();
        Ok(g.embed_rows(table, tokens, weights)?)
    }
}
