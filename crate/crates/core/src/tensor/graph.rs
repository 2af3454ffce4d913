use std::collections::BTreeMap;

use super::{dot, matmul_acc, norm, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Cosine(Var, Var),
    MaxCols {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Select(Var, usize),
    Row(Var, usize),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Nodes are appended in evaluation order, so the node list
/// is already a topological order and backward walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
    consumed: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named trainable parameter; repeated binds of one name share a leaf.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = params.get(name).ok_or_else(|| Error::Unknown {
            kind: "parameter",
            name: name.to_string(),
        })?;
        let v = self.leaf(t.clone(), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound parameter, after [`Graph::backward`].
    pub fn param_grads(&self) -> ParamSet {
        self.params
            .iter()
            .map(|(name, v)| {
                let value = &self.nodes[v.0].value;
                let g = self
                    .grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; value.len()]);
                let t = Tensor::new(value.shape().to_vec(), g).expect("grad matches value");
                (name.clone(), t)
            })
            .collect()
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rank() != 1 || ta.cols() != tb.len() {
            return Err(shape_err("add_row", ta, tb));
        }
        let n = tb.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % n])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x + c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::AddConst(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.len() != 1 {
            return Err(shape_err("scale_by", ta, ts));
        }
        let c = ts.data()[0];
        let data = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(shape_err("transpose", ta, ta));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Softmax over the last dimension, shifted by the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_finite() {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let n = ta.cols();
        let mut out = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(n) {
            out.extend(super::softmax(row));
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::SoftmaxRows(a), &[a]))
    }

    /// Per-row normalization with population variance, then `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            if !is.is_finite() {
                return Err(Error::NonFinite("layer_norm"));
            }
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(tg.data()[j] * h + tb.data()[j]);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// L2-normalizes every row.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        let mut norms = Vec::with_capacity(ta.rows());
        let mut out = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(n) {
            let nr = norm(row);
            if nr < 1e-12 {
                return Err(Error::Degenerate("normalize_rows"));
            }
            norms.push(nr);
            out.extend(row.iter().map(|v| v / nr));
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::NormalizeRows { x: a, norms }, &[a]))
    }

    /// Cosine similarity of two equal-length tensors viewed as flat vectors.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let c = super::cosine(self.value(u).data(), self.value(v).data())?;
        Ok(self.push(Tensor::scalar(c), Op::Cosine(u, v), &[u, v]))
    }

    /// Column-wise max of an m×n matrix; ties go to the lowest row index.
    pub fn max_cols(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(shape_err("max_cols", ta, ta));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut argmax = vec![0usize; n];
        let mut out = ta.data()[..n].to_vec();
        for i in 1..m {
            for j in 0..n {
                let v = ta.data()[i * n + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let value = Tensor::vector(out);
        Ok(self.push(value, Op::MaxCols { x: a, argmax }, &[a]))
    }

    /// Mean over rows of an m×n matrix, giving a length-n vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; n];
        for row in ta.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), &[a]))
    }

    /// `-log softmax(logits)[target]`, evaluated in log space.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let tl = self.value(logits);
        if target >= tl.len() {
            return Err(Error::Index {
                index: target,
                len: tl.len(),
            });
        }
        if !tl.is_finite() {
            return Err(Error::NonFinite("cross_entropy_logits"));
        }
        let max = tl.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = tl.data().iter().map(|x| (x - max).exp()).sum();
        let lse = max + z.ln();
        let loss = lse - tl.data()[target];
        let probs = tl.data().iter().map(|x| (x - lse).exp()).collect();
        let op = Op::CrossEntropy {
            logits,
            target,
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::NotApplicable("concat of nothing".into()));
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|p| self.value(*p).data().iter().copied())
            .collect();
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), parts))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::NotApplicable("stack of nothing".into()))?;
        let n = self.value(*first).len();
        let mut data = Vec::with_capacity(n * rows.len());
        for r in rows {
            let t = self.value(*r);
            if t.len() != n {
                return Err(shape_err("stack_rows", self.value(*first), t));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(value, Op::StackRows(rows.to_vec()), rows))
    }

    /// Single element at a flat index.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let ta = self.value(a);
        let v = *ta.data().get(index).ok_or(Error::Index {
            index,
            len: ta.len(),
        })?;
        Ok(self.push(Tensor::scalar(v), Op::Select(a, index), &[a]))
    }

    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let ta = self.value(a);
        if index >= ta.rows() {
            return Err(Error::Index {
                index,
                len: ta.rows(),
            });
        }
        let value = Tensor::vector(ta.row(index).to_vec());
        Ok(self.push(value, Op::Row(a, index), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        if ta.rank() != 2 || len == 0 || start + len > n {
            return Err(shape_err("slice_cols", ta, ta));
        }
        let data: Vec<f64> = ta
            .data()
            .chunks(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(vec![ta.rows(), len], data)?;
        Ok(self.push(value, Op::SliceCols { x: a, start }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::NotApplicable("concat of nothing".into()))?;
        let m = self.value(*first).rows();
        for p in parts {
            let t = self.value(*p);
            if t.rank() != 2 || t.rows() != m {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean of a list of scalar nodes.
    pub fn mean_of(&mut self, items: &[Var]) -> Result<Var> {
        let v = self.concat(items)?;
        let s = self.sum(v);
        Ok(self.scale(s, 1.0 / items.len() as f64))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Accumulates d(loss)/d(node) for every node that requires a gradient.
    /// Leaves that require a gradient but are unreachable receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if rg(a) {
                    // dA = dC · Bᵀ
                    let g = acc(&mut grads[a.0], m * k);
                    for i in 0..m {
                        let gi = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            g[i * k + p] += dot(gi, &tb.data()[p * n..(p + 1) * n]);
                        }
                    }
                }
                if rg(b) {
                    // dB = Aᵀ · dC
                    let g = acc(&mut grads[b.0], k * n);
                    for i in 0..m {
                        let gi = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (gv, gyv) in g[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *gv += av * gyv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if rg(v) {
                        let g = acc(&mut grads[v.0], gy.len());
                        g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(a) {
                    let g = acc(&mut grads[a.0], gy.len());
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if rg(b) {
                    let g = acc(&mut grads[b.0], gy.len());
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    let other = val(b).data();
                    let g = acc(&mut grads[a.0], gy.len());
                    for i in 0..gy.len() {
                        g[i] += gy[i] * other[i];
                    }
                }
                if rg(b) {
                    let other = val(a).data();
                    let g = acc(&mut grads[b.0], gy.len());
                    for i in 0..gy.len() {
                        g[i] += gy[i] * other[i];
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if rg(a) {
                    let g = acc(&mut grads[a.0], gy.len());
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if rg(bias) {
                    let n = val(bias).len();
                    let g = acc(&mut grads[bias.0], n);
                    for (i, d) in gy.iter().enumerate() {
                        g[i % n] += d;
                    }
                }
            }
            Op::AddConst(a) => {
                if rg(a) {
                    let g = acc(&mut grads[a.0], gy.len());
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Scale(a, c) => {
                if rg(a) {
                    let g = acc(&mut grads[a.0], gy.len());
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += c * d);
                }
            }
            Op::ScaleBy(a, s) => {
                let c = val(s).data()[0];
                if rg(a) {
                    let g = acc(&mut grads[a.0], gy.len());
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += c * d);
                }
                if rg(s) {
                    let ds = dot(gy, val(a).data());
                    acc(&mut grads[s.0], 1)[0] += ds;
                }
            }
            Op::Transpose(a) => {
                if rg(a) {
                    let (m, n) = (val(a).shape()[0], val(a).shape()[1]);
                    let g = acc(&mut grads[a.0], m * n);
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gy[j * m + i];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if rg(a) {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let g = acc(&mut grads[a.0], y.len());
                    for (r, (yr, gr)) in y.chunks(n).zip(gy.chunks(n)).enumerate() {
                        let s = dot(yr, gr);
                        for j in 0..n {
                            g[r * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = val(gamma).len();
                let gam = val(gamma).data();
                if rg(gamma) {
                    let g = acc(&mut grads[gamma.0], d);
                    for (i, dy) in gy.iter().enumerate() {
                        g[i % d] += dy * xhat[i];
                    }
                }
                if rg(beta) {
                    let g = acc(&mut grads[beta.0], d);
                    for (i, dy) in gy.iter().enumerate() {
                        g[i % d] += dy;
                    }
                }
                if rg(x) {
                    let g = acc(&mut grads[x.0], gy.len());
                    for (r, is) in inv_std.iter().enumerate() {
                        let base = r * d;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gy[base + j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[base + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gy[base + j] * gam[j];
                            g[base + j] += is * (dh - mean_dh - xhat[base + j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if rg(a) {
                    let xs = val(a).data();
                    let g = acc(&mut grads[a.0], gy.len());
                    for i in 0..gy.len() {
                        g[i] += gy[i] * gelu_grad(xs[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if rg(a) {
                    let y = node.value.data();
                    let g = acc(&mut grads[a.0], gy.len());
                    for i in 0..gy.len() {
                        g[i] += gy[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                if rg(x) {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let g = acc(&mut grads[x.0], y.len());
                    for (r, nr) in norms.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &gy[r * n..(r + 1) * n];
                        let s = dot(yr, gr);
                        for j in 0..n {
                            g[r * n + j] += (gr[j] - yr[j] * s) / nr;
                        }
                    }
                }
            }
            Op::Cosine(u, v) => {
                let (tu, tv) = (val(u).data(), val(v).data());
                let (nu, nv) = (norm(tu), norm(tv));
                if nu < 1e-12 || nv < 1e-12 {
                    return;
                }
                let c = node.value.data()[0];
                let d = gy[0];
                if rg(u) {
                    let g = acc(&mut grads[u.0], tu.len());
                    for i in 0..tu.len() {
                        g[i] += d * (tv[i] / (nu * nv) - c * tu[i] / (nu * nu));
                    }
                }
                if rg(v) {
                    let g = acc(&mut grads[v.0], tv.len());
                    for i in 0..tv.len() {
                        g[i] += d * (tu[i] / (nu * nv) - c * tv[i] / (nv * nv));
                    }
                }
            }
            Op::MaxCols { x, argmax } => {
                if rg(x) {
                    let n = argmax.len();
                    let g = acc(&mut grads[x.0], val(x).len());
                    for (j, &i) in argmax.iter().enumerate() {
                        g[i * n + j] += gy[j];
                    }
                }
            }
            Op::MeanRows(a) => {
                if rg(a) {
                    let ta = val(a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let g = acc(&mut grads[a.0], m * n);
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gy[j] / m as f64;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                if rg(logits) {
                    let g = acc(&mut grads[logits.0], probs.len());
                    for (i, p) in probs.iter().enumerate() {
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        g[i] += gy[0] * (p - onehot);
                    }
                }
            }
            Op::Concat(parts) | Op::StackRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(p).len();
                    if rg(p) {
                        let g = acc(&mut grads[p.0], n);
                        g.iter_mut()
                            .zip(&gy[off..off + n])
                            .for_each(|(g, d)| *g += d);
                    }
                    off += n;
                }
            }
            Op::Select(a, index) => {
                if rg(a) {
                    acc(&mut grads[a.0], val(a).len())[*index] += gy[0];
                }
            }
            Op::Row(a, index) => {
                if rg(a) {
                    let n = val(a).cols();
                    let g = acc(&mut grads[a.0], val(a).len());
                    g[index * n..(index + 1) * n]
                        .iter_mut()
                        .zip(gy)
                        .for_each(|(g, d)| *g += d);
                }
            }
            Op::SliceCols { x, start } => {
                if rg(x) {
                    let n = val(x).cols();
                    let len = node.value.cols();
                    let g = acc(&mut grads[x.0], val(x).len());
                    for (r, gr) in gy.chunks(len).enumerate() {
                        for (j, d) in gr.iter().enumerate() {
                            g[r * n + start + j] += d;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let n = val(p).cols();
                    if rg(p) {
                        let g = acc(&mut grads[p.0], val(p).len());
                        for (r, gr) in gy.chunks(total).enumerate() {
                            for j in 0..n {
                                g[r * n + j] += gr[off + j];
                            }
                        }
                    }
                    off += n;
                }
            }
            Op::Reshape(a) => {
                if rg(a) {
                    let g = acc(&mut grads[a.0], gy.len());
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Sum(a) => {
                if rg(a) {
                    let g = acc(&mut grads[a.0], val(a).len());
                    g.iter_mut().for_each(|g| *g += gy[0]);
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph, rows: usize, cols: usize, data: &[f64]) -> Var {
        g.leaf(Tensor::matrix(rows, cols, data.to_vec()).unwrap(), true)
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let z = mat(&mut g, 2, 2, &[0.0; 4]);
        let b = mat(&mut g, 2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let c = g.matmul(a, z).unwrap();
        assert_eq!(g.value(c).data(), &[0.0; 4]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 3, &[0.0; 6]);
        let b = mat(&mut g, 2, 3, &[0.0; 6]);
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = mat(&mut g, 3, 3, &[0.0, 0.0, 0.0, 7.0, 7.0, 7.0, 1.0, 2.0, 3.0]);
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y).data().to_vec();
        for j in 0..3 {
            assert!((v[j] - 1.0 / 3.0).abs() < 1e-15);
            assert!((v[3 + j] - 1.0 / 3.0).abs() < 1e-15);
        }
        let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_6, 0.665_240_955_774_822];
        for j in 0..3 {
            assert!((v[6 + j] - expect[j]).abs() < 1e-6);
        }
        let bad = mat(&mut g, 1, 2, &[f64::NAN, 0.0]);
        assert!(matches!(g.softmax_rows(bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = mat(&mut g, 1, 2, &[1.0, 3.0]);
        let ones = g.leaf(Tensor::vector(vec![1.0, 1.0]), false);
        let zeros = g.leaf(Tensor::vector(vec![0.0, 0.0]), false);
        let y = g.layer_norm(x, ones, zeros, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        let c = mat(&mut g, 1, 3, &[4.0, 4.0, 4.0]);
        let gamma = g.leaf(Tensor::vector(vec![2.0, 3.0, 4.0]), false);
        let beta = g.leaf(Tensor::vector(vec![0.5, 0.5, 0.5]), false);
        let y = g.layer_norm(c, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5]);

        let z = mat(&mut g, 1, 2, &[0.0, 0.0]);
        let gamma = g.leaf(Tensor::vector(vec![9.0, -3.0]), false);
        let beta = g.leaf(Tensor::vector(vec![5.0, 7.0]), false);
        let y = g.layer_norm(z, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 7.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::vector(vec![0.3, 0.3]), true);
        let ce = g.cross_entropy(l, 1).unwrap();
        assert!((g.scalar(ce) - std::f64::consts::LN_2).abs() < 1e-15);
        let l = g.leaf(Tensor::vector(vec![10.0, 0.0]), true);
        let ce = g.cross_entropy(l, 0).unwrap();
        assert!((g.scalar(ce) - 4.539_889_921_686_465e-5).abs() < 1e-9);
        let l = g.leaf(Tensor::vector(vec![0.0, 10.0]), true);
        let ce = g.cross_entropy(l, 0).unwrap();
        assert!((g.scalar(ce) - 10.000_045_398_899_218).abs() < 1e-6);
        assert!(matches!(g.cross_entropy(l, 2), Err(Error::Index { .. })));
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn detached_param_gets_zero_grad() {
        let mut params = ParamSet::new();
        params.insert("p".into(), Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let p = g.param(&params, "p").unwrap();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[0.0, 0.0]);
        assert_eq!(g.param_grads()["p"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn max_cols_ties_go_to_first_row() {
        let mut g = Graph::new();
        let x = mat(&mut g, 3, 1, &[0.5, 0.5, 0.5]);
        let m = g.max_cols(x).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut params = ParamSet::new();
        params.insert("w".into(), Tensor::scalar(2.0));
        let mut g = Graph::new();
        let a = g.param(&params, "w").unwrap();
        let b = g.param(&params, "w").unwrap();
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.param_grads()["w"].data(), &[4.0]);
    }
}
