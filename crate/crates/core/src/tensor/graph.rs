use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Affine(NodeId, NodeId, NodeId),
    Gather(NodeId, Vec<usize>),
    Softmax(NodeId, usize),
    LeakyRelu(NodeId, f64),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    Logistic(NodeId),
    Cosine {
        a: NodeId,
        b: NodeId,
        norm_a: Vec<f64>,
        norm_b: Vec<f64>,
    },
    Bce(NodeId, Vec<f64>),
    Concat(Vec<NodeId>, usize),
    Mean(NodeId),
    Sum(NodeId),
    Scale(NodeId, f64),
    SelectRows(NodeId, Vec<usize>),
    LogSoftmaxMasked(NodeId, Vec<bool>),
    Pick(NodeId, Vec<usize>),
}

#[derive(Debug)]
struct Node<'a> {
    /// Parameter nodes borrow the store's tensor; everything else owns its value.
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, keyed by parameter and by
/// differentiable leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Vec<f64>>,
    rows: BTreeMap<ParamId, SparseRows>,
    leaves: BTreeMap<NodeId, Vec<f64>>,
}

/// Row gradients of an embedding table reached only through gathers.
#[derive(Debug, Clone, Default)]
pub struct SparseRows {
    pub len: usize,
    pub width: usize,
    /// `(row, gradient)` in backward order; rows may repeat.
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl Gradients {
    /// Dense gradient of a parameter, or `None` if it received none.
    pub fn param(&self, id: ParamId) -> Option<Vec<f64>> {
        let dense = self.params.get(&id);
        let sparse = self.rows.get(&id);
        if dense.is_none() && sparse.is_none() {
            return None;
        }
        let len = dense.map_or_else(|| sparse.map_or(0, |s| s.len), Vec::len);
        let mut out = dense.cloned().unwrap_or_else(|| vec![0.0; len]);
        if let Some(s) = sparse {
            for (r, g) in &s.rows {
                add_into(&mut out[r * s.width..(r + 1) * s.width], g);
            }
        }
        Some(out)
    }

    pub fn leaf(&self, id: NodeId) -> Option<&[f64]> {
        self.leaves.get(&id).map(Vec::as_slice)
    }

    /// Dense parameter gradients.
    pub fn dense(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Sparse row gradients of gathered embedding tables.
    pub fn sparse(&self) -> impl Iterator<Item = (ParamId, &SparseRows)> {
        self.rows.iter().map(|(k, v)| (*k, v))
    }
}

/// Probability clamp applied inside binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;
const LAYER_NORM_EPS: f64 = 1e-5;
const COSINE_EPS: f64 = 1e-12;

/// A single forward pass recorded for reverse-mode differentiation.
///
/// Every primitive validates shapes and rejects non-finite results. The graph
/// reads parameter values from the store it borrows; gradients come back as a
/// [`Gradients`] value that the caller folds into the store.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.push_value(Cow::Owned(value), op)
    }

    fn push_value(&mut self, value: Cow<'a, Tensor>, op: Op) -> Result<NodeId> {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(id) => self.store.get(*id).trainable,
            _ => self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) | Op::MatMulT(a, b) => {
                vec![*a, *b]
            }
            Op::Affine(x, w, b) => vec![*x, *w, *b],
            Op::Gather(t, _) => vec![*t],
            Op::Softmax(x, _)
            | Op::LeakyRelu(x, _)
            | Op::Relu(x)
            | Op::Logistic(x)
            | Op::Bce(x, _)
            | Op::Mean(x)
            | Op::Sum(x)
            | Op::Scale(x, _)
            | Op::SelectRows(x, _)
            | Op::LogSoftmaxMasked(x, _)
            | Op::Pick(x, _) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Cosine { a, b, .. } => vec![*a, *b],
            Op::Concat(parts, _) => parts.clone(),
        }
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, "input")
    }

    /// Differentiable input whose gradient is reported by `Gradients::leaf`.
    pub fn variable(&mut self, value: Tensor) -> Result<NodeId> {
        let id = self.push(value, Op::Leaf, "variable")?;
        self.nodes[id.0].requires_grad = true;
        Ok(id)
    }

    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        if let Some(n) = self.param_nodes.get(&id) {
            return Ok(*n);
        }
        // Finiteness of stored values is enforced when they are created and
        // after every optimizer step, so the borrow needs no scan here.
        let value = self.store.value(id);
        let node = self.push_value(Cow::Borrowed(value), Op::Param(id))?;
        self.param_nodes.insert(id, node);
        Ok(node)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<NodeId> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        self.param(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), "add")
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err("add_row", va, vr));
        }
        let c = va.cols();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (d, b) in chunk.iter_mut().zip(vr.data()) {
                *d += b;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va, vb));
        }
        let out = matmul_nn(va.data(), va.rows(), va.cols(), vb.data(), vb.cols());
        let out = Tensor::matrix(va.rows(), vb.cols(), out)?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a * b^T` for `a: r x k`, `b: c x k`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(shape_err("matmul_t", va, vb));
        }
        let (r, k, c) = (va.rows(), va.cols(), vb.rows());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let ai = &va.data()[i * k..(i + 1) * k];
            for j in 0..c {
                out[i * c + j] = dot(ai, &vb.data()[j * k..(j + 1) * k]);
            }
        }
        let out = Tensor::matrix(r, c, out)?;
        self.push(out, Op::MatMulT(a, b), "matmul_t")
    }

    /// `x * w + b` with `x: r x k`, `w: k x c`, `b: 1 x c`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.cols() != vw.rows() {
            return Err(shape_err("affine", vx, vw));
        }
        if vb.len() != vw.cols() {
            return Err(shape_err("affine bias", vw, vb));
        }
        let (r, c) = (vx.rows(), vw.cols());
        let mut out = matmul_nn(vx.data(), r, vx.cols(), vw.data(), c);
        for chunk in out.chunks_mut(c) {
            for (o, bias) in chunk.iter_mut().zip(vb.data()) {
                *o += bias;
            }
        }
        let out = Tensor::matrix(r, c, out)?;
        self.push(out, Op::Affine(x, w, b), "affine")
    }

    /// Selects rows `ids` of `table`.
    pub fn embedding_gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let (n, d) = (vt.rows(), vt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(Error::invalid(format!(
                    "embedding_gather: index {i} out of range for table with {n} rows"
                )));
            }
            out.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::matrix(ids.len(), d, out)?;
        self.push(out, Op::Gather(table, ids.to_vec()), "embedding_gather")
    }

    /// Softmax along `axis` (0 = down each column, 1 = across each row).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if axis > 1 {
            return Err(Error::invalid(format!("softmax: axis {axis} out of range")));
        }
        let (r, c) = (vx.rows(), vx.cols());
        let mut out = vx.data().to_vec();
        for_each_lane(r, c, axis, |idx| softmax_in_place(&mut out, idx));
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(out, Op::Softmax(x, axis), "softmax")
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(out, Op::LeakyRelu(x, slope), "leaky_relu")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(out, Op::Relu(x), "relu")
    }

    /// Row-wise layer normalisation with learned gain and bias (`1 x c`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = (vx.rows(), vx.cols());
        if vg.len() != c || vb.len() != c {
            return Err(shape_err("layer_norm", vx, vg));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = vg.data()[j] * h + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Scaled dot-product attention split over `heads`. `key_mask[j]` false
    /// excludes key `j`; its weight is exactly zero for every query.
    pub fn multi_head_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        if vk.cols() != d || vv.cols() != d {
            return Err(shape_err("multi_head_attention", vq, vk));
        }
        if vk.rows() != vv.rows() {
            return Err(shape_err("multi_head_attention", vk, vv));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "multi_head_attention: width {d} not divisible by {heads} heads"
            )));
        }
        let (lq, lk) = (vq.rows(), vk.rows());
        let mask: Vec<bool> = match key_mask {
            Some(m) if m.len() != lk => {
                return Err(Error::Shape {
                    op: "multi_head_attention mask",
                    lhs: vec![lk],
                    rhs: vec![m.len()],
                })
            }
            Some(m) => m.to_vec(),
            None => vec![true; lk],
        };
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid("multi_head_attention: every key is masked"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * lq * lk];
        let mut out = vec![0.0; lq * d];
        let mut scores = vec![0.0; lk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qi = &vq.data()[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..lk {
                    if mask[j] {
                        let s = dot(qi, &vk.data()[j * d + off..j * d + off + dh]) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                }
                let mut total = 0.0;
                for j in 0..lk {
                    if mask[j] {
                        scores[j] = (scores[j] - max).exp();
                        total += scores[j];
                    }
                }
                let prow = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..lk {
                    if mask[j] {
                        let p = scores[j] / total;
                        prow[j] = p;
                        let vj = &vv.data()[j * d + off..j * d + off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(lq, d, out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            "multi_head_attention",
        )
    }

    pub fn logistic(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(out, Op::Logistic(x), "logistic")
    }

    /// Pairwise cosine similarity between the rows of `a` and `b`.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(shape_err("cosine_similarity", va, vb));
        }
        let (r, s, d) = (va.rows(), vb.rows(), va.cols());
        let norm = |t: &Tensor, i: usize| dot(&t.data()[i * d..(i + 1) * d], &t.data()[i * d..(i + 1) * d]).sqrt().max(COSINE_EPS);
        let norm_a: Vec<f64> = (0..r).map(|i| norm(va, i)).collect();
        let norm_b: Vec<f64> = (0..s).map(|j| norm(vb, j)).collect();
        let mut out = vec![0.0; r * s];
        for i in 0..r {
            for j in 0..s {
                out[i * s + j] = dot(&va.data()[i * d..(i + 1) * d], &vb.data()[j * d..(j + 1) * d])
                    / (norm_a[i] * norm_b[j]);
            }
        }
        let out = Tensor::matrix(r, s, out)?;
        self.push(
            out,
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            },
            "cosine_similarity",
        )
    }

    /// Element-wise binary cross-entropy of probabilities `p` against `labels`,
    /// with `p` clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn binary_cross_entropy(&mut self, p: NodeId, labels: &[f64]) -> Result<NodeId> {
        let vp = self.value(p);
        if vp.len() != labels.len() {
            return Err(Error::Shape {
                op: "binary_cross_entropy",
                lhs: vp.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid(format!(
                "binary_cross_entropy: label {bad} is not 0 or 1"
            )));
        }
        let data = vp
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .collect();
        let out = Tensor::new(vp.shape().to_vec(), data)?;
        self.push(out, Op::Bce(p, labels.to_vec()), "binary_cross_entropy")
    }

    /// Concatenates along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let f = self.value(*first);
        let (r0, c0) = (f.rows(), f.cols());
        let out = match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let v = self.value(*p);
                    if v.cols() != c0 {
                        return Err(shape_err("concat", f, v));
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Tensor::matrix(rows, c0, data)?
            }
            1 => {
                let mut cols = 0;
                for p in parts {
                    let v = self.value(*p);
                    if v.rows() != r0 {
                        return Err(shape_err("concat", f, v));
                    }
                    cols += v.cols();
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for p in parts {
                        data.extend_from_slice(self.value(*p).row_slice(i));
                    }
                }
                Tensor::matrix(r0, cols, data)?
            }
            _ => return Err(Error::invalid(format!("concat: axis {axis} out of range"))),
        };
        self.push(out, Op::Concat(parts.to_vec(), axis), "concat")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let m = vx.data().iter().sum::<f64>() / vx.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), "mean")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(out, Op::Scale(x, factor), "scale")
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::invalid(format!(
                    "select_rows: row {i} out of range for {r} rows"
                )));
            }
            data.extend_from_slice(vx.row_slice(i));
        }
        let out = Tensor::matrix(rows.len(), c, data)?;
        self.push(out, Op::SelectRows(x, rows.to_vec()), "select_rows")
    }

    /// Row-wise log-softmax restricted to entries where `mask` is true.
    /// Excluded entries are returned as 0 and receive no gradient.
    pub fn log_softmax_masked(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let vx = self.value(x);
        if mask.len() != vx.len() {
            return Err(Error::Shape {
                op: "log_softmax_masked",
                lhs: vx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let (r, c) = (vx.rows(), vx.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::invalid(format!("log_softmax_masked: row {i} fully masked")));
            }
            let lse = max
                + row
                    .iter()
                    .zip(m)
                    .filter(|(_, &keep)| keep)
                    .map(|(v, _)| (v - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..c {
                if m[j] {
                    out[i * c + j] = row[j] - lse;
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(out, Op::LogSoftmaxMasked(x, mask.to_vec()), "log_softmax_masked")
    }

    /// Picks flat (row-major) positions of `x` into a `1 x n` row.
    pub fn pick(&mut self, x: NodeId, positions: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        let mut data = Vec::with_capacity(positions.len());
        for &p in positions {
            if p >= vx.len() {
                return Err(Error::invalid(format!(
                    "pick: position {p} out of range for {} values",
                    vx.len()
                )));
            }
            data.push(vx.data()[p]);
        }
        self.push(Tensor::row(data), Op::Pick(x, positions.to_vec()), "pick")
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must have one element, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let val = |n: NodeId| &nodes[n.0].value;
        let mut acc = |n: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[n.0].requires_grad {
                let slot = grads[n.0].get_or_insert_with(|| vec![0.0; nodes[n.0].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {
                let e = out.leaves.entry(NodeId(idx)).or_insert_with(|| vec![0.0; g.len()]);
                add_into(e, g);
            }
            Op::Param(pid) => {
                let e = out.params.entry(*pid).or_insert_with(|| vec![0.0; g.len()]);
                add_into(e, g);
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |s| add_into(s, g));
                let c = val(*row).len();
                acc(*row, &mut |s| {
                    for chunk in g.chunks(c) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (r, k, c) = (va.rows(), va.cols(), vb.cols());
                acc(*a, &mut |s| grad_lhs_nn(s, g, vb.data(), r, k, c));
                acc(*b, &mut |s| grad_rhs_nn(s, g, va.data(), r, k, c));
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (r, k, c) = (va.rows(), va.cols(), vb.rows());
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            let gij = g[i * c + j];
                            if gij != 0.0 {
                                axpy(&mut s[i * k..(i + 1) * k], gij, &vb.data()[j * k..(j + 1) * k]);
                            }
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            let gij = g[i * c + j];
                            if gij != 0.0 {
                                axpy(&mut s[j * k..(j + 1) * k], gij, &va.data()[i * k..(i + 1) * k]);
                            }
                        }
                    }
                });
            }
            Op::Affine(x, w, b) => {
                let (vx, vw) = (val(*x), val(*w));
                let (r, k, c) = (vx.rows(), vx.cols(), vw.cols());
                acc(*x, &mut |s| grad_lhs_nn(s, g, vw.data(), r, k, c));
                acc(*w, &mut |s| grad_rhs_nn(s, g, vx.data(), r, k, c));
                acc(*b, &mut |s| {
                    for chunk in g.chunks(c) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::Gather(t, ids) => {
                let d = val(*t).cols();
                if let Op::Param(pid) = nodes[t.0].op {
                    if nodes[t.0].requires_grad {
                        let e = out.rows.entry(pid).or_insert_with(|| SparseRows {
                            len: val(*t).len(),
                            width: d,
                            rows: Vec::new(),
                        });
                        for (row, &id) in ids.iter().enumerate() {
                            e.rows.push((id, g[row * d..(row + 1) * d].to_vec()));
                        }
                    }
                    return;
                }
                acc(*t, &mut |s| {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (r, c) = (node.value.rows(), node.value.cols());
                acc(*x, &mut |s| {
                    for_each_lane(r, c, *axis, |lane| {
                        let dot: f64 = lane.clone().map(|i| g[i] * y[i]).sum();
                        for i in lane {
                            s[i] += y[i] * (g[i] - dot);
                        }
                    });
                });
            }
            Op::LeakyRelu(x, slope) => {
                let vx = val(*x).data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += if vx[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x).data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if vx[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let vg = val(*gamma).data();
                let (r, c) = (node.value.rows(), node.value.cols());
                acc(*gamma, &mut |s| {
                    for i in 0..r * c {
                        s[i % c] += g[i] * xhat[i];
                    }
                });
                acc(*beta, &mut |s| {
                    for i in 0..r * c {
                        s[i % c] += g[i];
                    }
                });
                acc(*x, &mut |s| {
                    let n = c as f64;
                    for i in 0..r {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let dxh = g[i * c + j] * vg[j];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dxh = g[i * c + j] * vg[j];
                            s[i * c + j] +=
                                inv_std[i] / n * (n * dxh - sum_d - xhat[i * c + j] * sum_dx);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                let d = vq.cols();
                let (lq, lk) = (vq.rows(), vk.rows());
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; lq * d];
                let mut dk = vec![0.0; lk * d];
                let mut dv = vec![0.0; lk * d];
                let mut dp = vec![0.0; lk];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..lq {
                        let gi = &g[i * d + off..i * d + off + dh];
                        let prow = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                        let mut weighted = 0.0;
                        for j in 0..lk {
                            if prow[j] != 0.0 {
                                dp[j] = dot(gi, &vv.data()[j * d + off..j * d + off + dh]);
                                weighted += prow[j] * dp[j];
                                axpy(&mut dv[j * d + off..j * d + off + dh], prow[j], gi);
                            }
                        }
                        let qi = &vq.data()[i * d + off..i * d + off + dh];
                        for j in 0..lk {
                            if prow[j] != 0.0 {
                                let ds = prow[j] * (dp[j] - weighted) * scale;
                                axpy(
                                    &mut dq[i * d + off..i * d + off + dh],
                                    ds,
                                    &vk.data()[j * d + off..j * d + off + dh],
                                );
                                axpy(&mut dk[j * d + off..j * d + off + dh], ds, qi);
                            }
                        }
                    }
                }
                acc(*q, &mut |s| add_into(s, &dq));
                acc(*k, &mut |s| add_into(s, &dk));
                acc(*v, &mut |s| add_into(s, &dv));
            }
            Op::Logistic(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let (va, vb) = (val(*a), val(*b));
                let (r, s_rows, d) = (va.rows(), vb.rows(), va.cols());
                let cos = node.value.data();
                acc(*a, &mut |s| {
                    for i in 0..r {
                        let ai = &va.data()[i * d..(i + 1) * d];
                        for j in 0..s_rows {
                            let gij = g[i * s_rows + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let bj = &vb.data()[j * d..(j + 1) * d];
                            let c1 = gij / (norm_a[i] * norm_b[j]);
                            let c2 = gij * cos[i * s_rows + j] / (norm_a[i] * norm_a[i]);
                            for t in 0..d {
                                s[i * d + t] += c1 * bj[t] - c2 * ai[t];
                            }
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..r {
                        let ai = &va.data()[i * d..(i + 1) * d];
                        for j in 0..s_rows {
                            let gij = g[i * s_rows + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let bj = &vb.data()[j * d..(j + 1) * d];
                            let c1 = gij / (norm_a[i] * norm_b[j]);
                            let c2 = gij * cos[i * s_rows + j] / (norm_b[j] * norm_b[j]);
                            for t in 0..d {
                                s[j * d + t] += c1 * ai[t] - c2 * bj[t];
                            }
                        }
                    }
                });
            }
            Op::Bce(p, labels) => {
                let vp = val(*p).data();
                acc(*p, &mut |s| {
                    for i in 0..s.len() {
                        let pi = vp[i];
                        if pi < BCE_CLAMP || pi > 1.0 - BCE_CLAMP {
                            continue;
                        }
                        let y = labels[i];
                        s[i] += g[i] * (-y / pi + (1.0 - y) / (1.0 - pi));
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let total_cols = node.value.cols();
                let mut offset = 0;
                for part in parts {
                    let vp = val(*part);
                    let (pr, pc) = (vp.rows(), vp.cols());
                    let start = offset;
                    acc(*part, &mut |s| {
                        if *axis == 0 {
                            add_into(s, &g[start..start + pr * pc]);
                        } else {
                            for i in 0..pr {
                                add_into(
                                    &mut s[i * pc..(i + 1) * pc],
                                    &g[i * total_cols + start..i * total_cols + start + pc],
                                );
                            }
                        }
                    });
                    offset += if *axis == 0 { pr * pc } else { pc };
                }
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Sum(x) => {
                acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Scale(x, factor) => {
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += factor * g[i];
                    }
                });
            }
            Op::SelectRows(x, rows) => {
                let c = val(*x).cols();
                acc(*x, &mut |s| {
                    for (o, &i) in rows.iter().enumerate() {
                        add_into(&mut s[i * c..(i + 1) * c], &g[o * c..(o + 1) * c]);
                    }
                });
            }
            Op::LogSoftmaxMasked(x, mask) => {
                let y = node.value.data();
                let (r, c) = (node.value.rows(), node.value.cols());
                acc(*x, &mut |s| {
                    for i in 0..r {
                        let gsum: f64 = (0..c)
                            .filter(|&j| mask[i * c + j])
                            .map(|j| g[i * c + j])
                            .sum();
                        for j in 0..c {
                            let t = i * c + j;
                            if mask[t] {
                                s[t] += g[t] - y[t].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::Pick(x, positions) => {
                acc(*x, &mut |s| {
                    for (o, &p) in positions.iter().enumerate() {
                        s[p] += g[o];
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], alpha: f64, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += alpha * v;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_nn(a: &[f64], r: usize, k: usize, b: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for t in 0..k {
            let av = a[i * k + t];
            if av != 0.0 {
                axpy(orow, av, &b[t * c..(t + 1) * c]);
            }
        }
    }
    out
}

/// `ga += g * b^T` for `g: r x c`, `b: k x c`.
fn grad_lhs_nn(ga: &mut [f64], g: &[f64], b: &[f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let gi = &g[i * c..(i + 1) * c];
        for t in 0..k {
            ga[i * k + t] += dot(gi, &b[t * c..(t + 1) * c]);
        }
    }
}

/// `gb += a^T * g` for `a: r x k`, `g: r x c`.
fn grad_rhs_nn(gb: &mut [f64], g: &[f64], a: &[f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let gi = &g[i * c..(i + 1) * c];
        for t in 0..k {
            let av = a[i * k + t];
            if av != 0.0 {
                axpy(&mut gb[t * c..(t + 1) * c], av, gi);
            }
        }
    }
}

fn for_each_lane(
    r: usize,
    c: usize,
    axis: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    if axis == 1 {
        for i in 0..r {
            f((i * c..(i + 1) * c).step_by(1));
        }
    } else {
        for j in 0..c {
            f((j..r * c).step_by(c));
        }
    }
}

fn softmax_in_place(
    data: &mut [f64],
    lane: std::iter::StepBy<std::ops::Range<usize>>,
) {
    let idx: Vec<usize> = lane.collect();
    let max = idx.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &i in &idx {
        data[i] = (data[i] - max).exp();
        total += data[i];
    }
    for &i in &idx {
        data[i] /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamGroup;

    fn store_with(values: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in values {
            s.add(*n, t.clone(), ParamGroup::FieldLevel, true).unwrap();
        }
        s
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::row(vec![0.7; 5])).unwrap();
        let y = g.softmax(x, 1).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn logistic_and_bce_at_one_half() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::scalar(0.0)).unwrap();
        let p = g.logistic(x).unwrap();
        assert_eq!(g.value(p).item(), 0.5);
        for y in [0.0, 1.0] {
            let l = g.binary_cross_entropy(p, &[y]).unwrap();
            assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_rejects_non_binary_labels() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let p = g.input(Tensor::scalar(0.3)).unwrap();
        assert!(g.binary_cross_entropy(p, &[0.5]).is_err());
    }

    #[test]
    fn shape_mismatch_names_operation() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_intermediate_is_an_error() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::row(vec![f64::MAX, f64::MAX])).unwrap();
        assert!(matches!(g.add(a, a), Err(Error::NonFinite("add"))));
    }

    #[test]
    fn masked_keys_get_exactly_zero_weight() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g
            .input(Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap())
            .unwrap();
        let mask = [true, false, true];
        let out = g.multi_head_attention(q, q, q, 2, Some(&mask)).unwrap();
        let Op::Attention { probs, .. } = &g.nodes[out.0].op else {
            unreachable!()
        };
        for h in 0..2 {
            for i in 0..3 {
                let row = &probs[(h * 3 + i) * 3..(h * 3 + i + 1) * 3];
                assert_eq!(row[1], 0.0);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gather_gradient_lands_on_selected_row() {
        let table = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let store = store_with(&[("e", table)]);
        let mut g = Graph::new(&store);
        let t = g.param_by_name("e").unwrap();
        let row = g.embedding_gather(t, &[1]).unwrap();
        assert_eq!(g.value(row).data(), &[0.0, 1.0, 0.0]);
        let s = g.sum(row).unwrap();
        let grads = g.backward(s).unwrap();
        let ge = grads.param(store.id("e").unwrap()).unwrap();
        assert_eq!(ge, &[0., 0., 0., 1., 1., 1., 0., 0., 0.]);
    }

    #[test]
    fn variable_leaf_reports_gradient() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.variable(Tensor::row(vec![1.0, 2.0])).unwrap();
        let y = g.scale(x, 3.0).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.leaf(x).unwrap(), &[3.0, 3.0]);
    }
}
