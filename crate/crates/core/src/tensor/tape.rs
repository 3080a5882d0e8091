use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct GruSaved {
    update: Vec<f64>,
    reset: Vec<f64>,
    candidate: Vec<f64>,
    gated_hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    ConcatCols(Var, Var),
    Index(Var, usize),
    Row(Var, usize),
    /// Contiguous block starting at a flat offset.
    Slice(Var, usize),
    Reshape(Var),
    EmbedRows {
        table: Var,
        tokens: Vec<Vec<usize>>,
        weights: Vec<Vec<f64>>,
    },
    Gru {
        x: Var,
        h: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        saved: Box<GruSaved>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations.
///
/// Nodes are only ever pushed after their inputs exist, so insertion order is
/// a topological order and `backward` is a single reverse sweep.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Numeric {
            op,
            detail: "non-finite input".into(),
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_slice(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// `out[n] += a[n x k] * x[k]`
fn gemv_acc(a: &[f64], x: &[f64], out: &mut [f64]) {
    let k = x.len();
    for (o, row) in out.iter_mut().zip(a.chunks_exact(k)) {
        *o += row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
    }
}

/// `out[k] += a[n x k]^T * y[n]`
fn gemv_t_acc(a: &[f64], y: &[f64], out: &mut [f64]) {
    let k = out.len();
    for (yi, row) in y.iter().zip(a.chunks_exact(k)) {
        if *yi == 0.0 {
            continue;
        }
        for (o, p) in out.iter_mut().zip(row) {
            *o += yi * p;
        }
    }
}

/// `out[n x k] += y[n] x[k]^T`
fn outer_acc(y: &[f64], x: &[f64], out: &mut [f64]) {
    let k = x.len();
    for (yi, row) in y.iter().zip(out.chunks_exact_mut(k)) {
        if *yi == 0.0 {
            continue;
        }
        for (o, xj) in row.iter_mut().zip(x) {
            *o += yi * xj;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of a node after `backward`; zeros for nodes the loss does
    /// not reach, `None` for nodes that do not require gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Some(Tensor {
            shape: node.value.shape().to_vec(),
            data,
        })
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ta.data()[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &tb.data()[p * n..(p + 1) * n];
                for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// `a[m x k] * b[n x k]^T`, i.e. a linear map applied to every row of `a`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            gemv_acc(tb.data(), &ta.data()[i * k..(i + 1) * k], &mut out[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMulNt(a, b),
            rg,
        ))
    }

    /// `a[m x k] * x[k]`
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (ta, tx) = (self.value(a), self.value(x));
        if ta.rank() != 2 || tx.rank() != 1 || ta.shape()[1] != tx.shape()[0] {
            return Err(shape_err("matvec", ta, tx));
        }
        let mut out = vec![0.0; ta.shape()[0]];
        gemv_acc(ta.data(), tx.data(), &mut out);
        let rg = self.rg(a) || self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::MatVec(a, x), rg))
    }

    /// `x[m]^T * a[m x k]`, a convex combination of rows when `x` is a
    /// probability vector.
    pub fn vecmat(&mut self, x: Var, a: Var) -> Result<Var> {
        let (tx, ta) = (self.value(x), self.value(a));
        if ta.rank() != 2 || tx.rank() != 1 || ta.shape()[0] != tx.shape()[0] {
            return Err(shape_err("vecmat", tx, ta));
        }
        let mut out = vec![0.0; ta.shape()[1]];
        gemv_t_acc(ta.data(), tx.data(), &mut out);
        let rg = self.rg(a) || self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::VecMat(x, a), rg))
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else if tb.numel() == 1 {
            ta.shape().to_vec()
        } else {
            return Err(shape_err(op_name, ta, tb));
        };
        let n: usize = shape.iter().product();
        let (sa, sb) = (ta.numel() == 1, tb.numel() == 1);
        let data = (0..n)
            .map(|k| f(ta.data()[if sa { 0 } else { k }], tb.data()[if sb { 0 } else { k }]))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds the vector `b[n]` to every row of `a[m x n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.numel() != ta.shape()[1] {
            return Err(shape_err("add_row", ta, tb));
        }
        let n = ta.shape()[1];
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| v + tb.data()[k % n])
            .collect();
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|v| v * c).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant `c`.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|v| v + c).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::AddConst(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    /// Standard logistic `1 / (1 + exp(-z))`.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(TensorError::Numeric {
                op: "log",
                detail: "argument must be positive and finite".into(),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 1 {
            return Err(shape_err("softmax", ta, ta));
        }
        check_finite("softmax", ta)?;
        let t = Tensor::vector(softmax_slice(ta.data()));
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 1 {
            return Err(shape_err("log_softmax", ta, ta));
        }
        check_finite("log_softmax", ta)?;
        let t = Tensor::vector(log_softmax_slice(ta.data()));
        let rg = self.rg(a);
        Ok(self.push(t, Op::LogSoftmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("dot", ta, tb));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    /// Concatenates scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() > 1 {
                return Err(shape_err("concat", t, t));
            }
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| TensorError::Contract("stack of zero rows".into()))?;
        let width = self.value(*first).numel();
        let mut data = Vec::with_capacity(width * rows.len());
        for &r in rows {
            let t = self.value(r);
            if t.rank() > 1 || t.numel() != width {
                return Err(shape_err("stack_rows", self.value(*first), t));
            }
            data.extend_from_slice(t.data());
        }
        let rg = rows.iter().any(|&r| self.rg(r));
        let t = Tensor {
            shape: vec![rows.len(), width],
            data,
        };
        Ok(self.push(t, Op::StackRows(rows.to_vec()), rg))
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(shape_err("concat_cols", ta, tb));
        }
        let (m, p, q) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&ta.data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&tb.data()[i * q..(i + 1) * q]);
        }
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor {
            shape: vec![m, p + q],
            data,
        };
        Ok(self.push(t, Op::ConcatCols(a, b), rg))
    }

    /// Element `i` of a vector as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() > 1 || i >= ta.numel() {
            return Err(TensorError::Shape {
                op: "index",
                left: ta.shape().to_vec(),
                right: vec![i],
            });
        }
        let v = ta.data()[i];
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(v), Op::Index(a, i), rg))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || i >= ta.shape()[0] {
            return Err(TensorError::Shape {
                op: "row",
                left: ta.shape().to_vec(),
                right: vec![i],
            });
        }
        let n = ta.shape()[1];
        let t = Tensor::vector(ta.data()[i * n..(i + 1) * n].to_vec());
        let rg = self.rg(a);
        Ok(self.push(t, Op::Row(a, i), rg))
    }

    /// Leading-axis range `start..end` of a vector or matrix.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() == 0 || ta.rank() > 2 || start >= end || end > ta.shape()[0] {
            return Err(TensorError::Shape {
                op: "slice",
                left: ta.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let inner: usize = ta.shape()[1..].iter().product();
        let mut shape = ta.shape().to_vec();
        shape[0] = end - start;
        let t = Tensor {
            shape,
            data: ta.data()[start * inner..end * inner].to_vec(),
        };
        let rg = self.rg(a);
        Ok(self.push(t, Op::Slice(a, start * inner), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Weighted bag-of-embeddings per row.
    ///
    /// Row `r` of the result is `sum_j weights[r][j*d..(j+1)*d] * table[tokens[r][j]]`,
    /// where `d` is the embedding width.
    pub fn embed_rows(&mut self, table: Var, tokens: Vec<Vec<usize>>, weights: Vec<Vec<f64>>) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 || tokens.is_empty() || tokens.len() != weights.len() {
            return Err(TensorError::Shape {
                op: "embed_rows",
                left: tt.shape().to_vec(),
                right: vec![tokens.len(), weights.len()],
            });
        }
        let (vocab, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = vec![0.0; tokens.len() * d];
        for (r, (toks, w)) in tokens.iter().zip(&weights).enumerate() {
            if w.len() != toks.len() * d {
                return Err(TensorError::Shape {
                    op: "embed_rows",
                    left: vec![toks.len(), d],
                    right: vec![w.len()],
                });
            }
            let out = &mut data[r * d..(r + 1) * d];
            for (j, &tok) in toks.iter().enumerate() {
                if tok >= vocab {
                    return Err(TensorError::Contract(format!(
                        "token id {tok} outside embedding table of {vocab} rows"
                    )));
                }
                let erow = &tt.data()[tok * d..(tok + 1) * d];
                for ((o, e), wv) in out.iter_mut().zip(erow).zip(&w[j * d..(j + 1) * d]) {
                    *o += e * wv;
                }
            }
        }
        let rg = self.rg(table);
        let t = Tensor {
            shape: vec![tokens.len(), d],
            data,
        };
        Ok(self.push(t, Op::EmbedRows { table, tokens, weights }, rg))
    }

    /// Gated recurrent unit step applied independently to every row.
    ///
    /// Also accepts a single `x[i]`, `h[d]` pair, returning `h'[d]`.
    ///
    /// Row form: `x[n x i]`, `h[n x d]`, `w_ih[3d x i]`, `w_hh[3d x d]`, `bias[3d]`, with
    /// gate blocks ordered (update, reset, candidate):
    ///
    /// ```text
    /// u  = sigmoid(W_u x + U_u h + b_u)
    /// r  = sigmoid(W_r x + U_r h + b_r)
    /// h~ = tanh(W_c x + U_c (r * h) + b_c)
    /// h' = (1 - u) * h + u * h~
    /// ```
    pub fn gru(&mut self, x: Var, h: Var, w_ih: Var, w_hh: Var, bias: Var) -> Result<Var> {
        let (tx, th) = (self.value(x), self.value(h));
        let (twi, twh, tb) = (self.value(w_ih), self.value(w_hh), self.value(bias));
        let (n, ni, d) = gru_dims(tx, th).ok_or_else(|| shape_err("gru", tx, th))?;
        if twi.shape() != [3 * d, ni] {
            return Err(shape_err("gru", twi, tx));
        }
        if twh.shape() != [3 * d, d] {
            return Err(shape_err("gru", twh, th));
        }
        if tb.numel() != 3 * d {
            return Err(shape_err("gru", tb, th));
        }
        let out_shape = th.shape().to_vec();
        let mut saved = GruSaved {
            update: vec![0.0; n * d],
            reset: vec![0.0; n * d],
            candidate: vec![0.0; n * d],
            gated_hidden: vec![0.0; n * d],
        };
        let mut out = vec![0.0; n * d];
        let wh = twh.data();
        let mut ax = vec![0.0; 3 * d];
        let mut ah = vec![0.0; 2 * d];
        let mut an = vec![0.0; d];
        for row in 0..n {
            let xr = &tx.data()[row * ni..(row + 1) * ni];
            let hr = &th.data()[row * d..(row + 1) * d];
            ax.copy_from_slice(tb.data());
            gemv_acc(twi.data(), xr, &mut ax);
            ah.iter_mut().for_each(|v| *v = 0.0);
            gemv_acc(&wh[..2 * d * d], hr, &mut ah);
            let rs = row * d..(row + 1) * d;
            for k in 0..d {
                saved.update[rs.start + k] = sigmoid(ax[k] + ah[k]);
                let r = sigmoid(ax[d + k] + ah[d + k]);
                saved.reset[rs.start + k] = r;
                saved.gated_hidden[rs.start + k] = r * hr[k];
            }
            an.copy_from_slice(&ax[2 * d..]);
            gemv_acc(&wh[2 * d * d..], &saved.gated_hidden[rs.clone()], &mut an);
            for k in 0..d {
                let c = an[k].tanh();
                let u = saved.update[rs.start + k];
                saved.candidate[rs.start + k] = c;
                out[rs.start + k] = (1.0 - u) * hr[k] + u * c;
            }
        }
        let rg = [x, h, w_ih, w_hh, bias].iter().any(|&v| self.rg(v));
        let t = Tensor {
            shape: out_shape,
            data: out,
        };
        Ok(self.push(
            t,
            Op::Gru {
                x,
                h,
                w_ih,
                w_hh,
                bias,
                saved: Box::new(saved),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// A tape accepts one `backward`; a second call without
    /// [`Tape::reset_grads`] is a contract error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Contract(
                "backward already ran on this tape; reset_grads first".into(),
            ));
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn acc<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// Accumulates `d(out)/d(input) * g` into a possibly broadcast input.
fn acc_broadcast(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], local: impl Fn(usize) -> f64) {
    let scalar = nodes[v.0].value.numel() == 1 && g.len() != 1;
    if let Some(dst) = acc(nodes, grads, v) {
        if scalar {
            dst[0] += g.iter().enumerate().map(|(k, gk)| gk * local(k)).sum::<f64>();
        } else {
            for (k, (d, gk)) in dst.iter_mut().zip(g).enumerate() {
                *d += gk * local(k);
            }
        }
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let out = &nodes[i].value;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(da) = acc(nodes, grads, *a) {
                for r in 0..m {
                    gemv_acc(tb.data(), &g[r * n..(r + 1) * n], &mut da[r * k..(r + 1) * k]);
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for r in 0..m {
                    outer_acc(&ta.data()[r * k..(r + 1) * k], &g[r * n..(r + 1) * n], db);
                }
            }
        }
        Op::MatMulNt(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
            if let Some(da) = acc(nodes, grads, *a) {
                for r in 0..m {
                    gemv_t_acc(tb.data(), &g[r * n..(r + 1) * n], &mut da[r * k..(r + 1) * k]);
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for r in 0..m {
                    outer_acc(&g[r * n..(r + 1) * n], &ta.data()[r * k..(r + 1) * k], db);
                }
            }
        }
        Op::MatVec(a, x) => {
            let (ta, tx) = (val(*a), val(*x));
            if let Some(da) = acc(nodes, grads, *a) {
                outer_acc(g, tx.data(), da);
            }
            if let Some(dx) = acc(nodes, grads, *x) {
                gemv_t_acc(ta.data(), g, dx);
            }
        }
        Op::VecMat(x, a) => {
            let (ta, tx) = (val(*a), val(*x));
            if let Some(dx) = acc(nodes, grads, *x) {
                gemv_acc(ta.data(), g, dx);
            }
            if let Some(da) = acc(nodes, grads, *a) {
                outer_acc(tx.data(), g, da);
            }
        }
        Op::Add(a, b) => {
            acc_broadcast(nodes, grads, *a, g, |_| 1.0);
            acc_broadcast(nodes, grads, *b, g, |_| 1.0);
        }
        Op::Sub(a, b) => {
            acc_broadcast(nodes, grads, *a, g, |_| 1.0);
            acc_broadcast(nodes, grads, *b, g, |_| -1.0);
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let pick = |t: &Tensor, k: usize| t.data()[if t.numel() == 1 { 0 } else { k }];
            acc_broadcast(nodes, grads, *a, g, |k| pick(tb, k));
            acc_broadcast(nodes, grads, *b, g, |k| pick(ta, k));
        }
        Op::AddRow(a, b) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, gk)| *d += gk);
            }
            let n = val(*b).numel();
            if let Some(db) = acc(nodes, grads, *b) {
                for row in g.chunks_exact(n) {
                    db.iter_mut().zip(row).for_each(|(d, gk)| *d += gk);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, gk)| *d += c * gk);
            }
        }
        Op::AddConst(a) | Op::Reshape(a) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, gk)| *d += gk);
            }
        }
        Op::Sigmoid(a) => {
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, gk), s) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += gk * s * (1.0 - s);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, gk), t) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += gk * (1.0 - t * t);
                }
            }
        }
        Op::Relu(a) => {
            let ta = val(*a);
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, gk), x) in da.iter_mut().zip(g).zip(ta.data()) {
                    if *x > 0.0 {
                        *d += gk;
                    }
                }
            }
        }
        Op::Exp(a) => {
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, gk), e) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += gk * e;
                }
            }
        }
        Op::Log(a) => {
            let ta = val(*a);
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, gk), x) in da.iter_mut().zip(g).zip(ta.data()) {
                    *d += gk / x;
                }
            }
        }
        Op::Softmax(a) => {
            let s = out.data();
            let inner: f64 = g.iter().zip(s).map(|(gk, sk)| gk * sk).sum();
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, gk), sk) in da.iter_mut().zip(g).zip(s) {
                    *d += sk * (gk - inner);
                }
            }
        }
        Op::LogSoftmax(a) => {
            let total: f64 = g.iter().sum();
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, gk), l) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += gk - l.exp() * total;
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(da) = acc(nodes, grads, *a) {
                let n = da.len() as f64;
                da.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        Op::Dot(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().zip(tb.data()).for_each(|(d, y)| *d += g[0] * y);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                db.iter_mut().zip(ta.data()).for_each(|(d, x)| *d += g[0] * x);
            }
        }
        Op::Concat(parts) | Op::StackRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(*p).numel();
                if let Some(dp) = acc(nodes, grads, *p) {
                    dp.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, gk)| *d += gk);
                }
                offset += n;
            }
        }
        Op::ConcatCols(a, b) => {
            let (p, q) = (val(*a).shape()[1], val(*b).shape()[1]);
            if let Some(da) = acc(nodes, grads, *a) {
                for (row, grow) in da.chunks_exact_mut(p).zip(g.chunks_exact(p + q)) {
                    row.iter_mut().zip(&grow[..p]).for_each(|(d, gk)| *d += gk);
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for (row, grow) in db.chunks_exact_mut(q).zip(g.chunks_exact(p + q)) {
                    row.iter_mut().zip(&grow[p..]).for_each(|(d, gk)| *d += gk);
                }
            }
        }
        Op::Index(a, idx) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da[*idx] += g[0];
            }
        }
        Op::Row(a, idx) => {
            let n = out.numel();
            if let Some(da) = acc(nodes, grads, *a) {
                da[idx * n..(idx + 1) * n]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, gk)| *d += gk);
            }
        }
        Op::Slice(a, offset) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da[*offset..*offset + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, gk)| *d += gk);
            }
        }
        Op::EmbedRows { table, tokens, weights } => {
            let d = val(*table).shape()[1];
            if let Some(dt) = acc(nodes, grads, *table) {
                for (r, (toks, w)) in tokens.iter().zip(weights).enumerate() {
                    let grow = &g[r * d..(r + 1) * d];
                    for (j, &tok) in toks.iter().enumerate() {
                        let dst = &mut dt[tok * d..(tok + 1) * d];
                        for ((o, gk), wv) in dst.iter_mut().zip(grow).zip(&w[j * d..(j + 1) * d]) {
                            *o += gk * wv;
                        }
                    }
                }
            }
        }
        Op::Gru {
            x,
            h,
            w_ih,
            w_hh,
            bias,
            saved,
        } => gru_backward(nodes, grads, g, [*x, *h, *w_ih, *w_hh, *bias], saved),
    }
}

/// `(rows, input width, hidden width)` for matching row-batched or single-vector
/// GRU arguments.
fn gru_dims(x: &Tensor, h: &Tensor) -> Option<(usize, usize, usize)> {
    match (x.rank(), h.rank()) {
        (1, 1) => Some((1, x.numel(), h.numel())),
        (2, 2) if x.shape()[0] == h.shape()[0] => Some((x.shape()[0], x.shape()[1], h.shape()[1])),
        _ => None,
    }
}

fn gru_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], g: &[f64], vars: [Var; 5], saved: &GruSaved) {
    let [x, h, w_ih, w_hh, bias] = vars;
    let tx = &nodes[x.0].value;
    let th = &nodes[h.0].value;
    let (n, ni, d) = gru_dims(tx, th).expect("shapes validated in forward");
    let wi = nodes[w_ih.0].value.data();
    let wh = nodes[w_hh.0].value.data();

    // Pre-activation gradients for all rows, blocks (update, reset, candidate).
    let mut dpre = vec![0.0; n * 3 * d];
    let mut dh = vec![0.0; n * d];
    let mut ds = vec![0.0; d];
    for row in 0..n {
        let rs = row * d;
        let hr = &th.data()[rs..rs + d];
        let dp = &mut dpre[row * 3 * d..(row + 1) * 3 * d];
        for k in 0..d {
            let gk = g[rs + k];
            let u = saved.update[rs + k];
            let c = saved.candidate[rs + k];
            dh[rs + k] += gk * (1.0 - u);
            dp[k] = gk * (c - hr[k]) * u * (1.0 - u);
            dp[2 * d + k] = gk * u * (1.0 - c * c);
        }
        ds.iter_mut().for_each(|v| *v = 0.0);
        gemv_t_acc(&wh[2 * d * d..], &dp[2 * d..], &mut ds);
        for k in 0..d {
            let r = saved.reset[rs + k];
            dh[rs + k] += ds[k] * r;
            dp[d + k] = ds[k] * hr[k] * r * (1.0 - r);
        }
        let (dzr, _) = dp.split_at(2 * d);
        gemv_t_acc(&wh[..2 * d * d], dzr, &mut dh[rs..rs + d]);
    }

    if let Some(dx) = acc(nodes, grads, x) {
        for row in 0..n {
            gemv_t_acc(
                wi,
                &dpre[row * 3 * d..(row + 1) * 3 * d],
                &mut dx[row * ni..(row + 1) * ni],
            );
        }
    }
    if let Some(dhv) = acc(nodes, grads, h) {
        dhv.iter_mut().zip(&dh).for_each(|(a, b)| *a += b);
    }
    if let Some(dwi) = acc(nodes, grads, w_ih) {
        for row in 0..n {
            outer_acc(
                &dpre[row * 3 * d..(row + 1) * 3 * d],
                &tx.data()[row * ni..(row + 1) * ni],
                dwi,
            );
        }
    }
    if let Some(dwh) = acc(nodes, grads, w_hh) {
        for row in 0..n {
            let dp = &dpre[row * 3 * d..(row + 1) * 3 * d];
            let hr = &th.data()[row * d..(row + 1) * d];
            outer_acc(&dp[..2 * d], hr, &mut dwh[..2 * d * d]);
            outer_acc(
                &dp[2 * d..],
                &saved.gated_hidden[row * d..(row + 1) * d],
                &mut dwh[2 * d * d..],
            );
        }
    }
    if let Some(db) = acc(nodes, grads, bias) {
        for row in dpre.chunks_exact(3 * d) {
            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
}
