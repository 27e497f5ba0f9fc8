//! Parameter initialisation and the post-norm Transformer layer shared by the
//! token-level and field-level encoders.

use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, ParamGroup, ParamId, ParamStore, Tensor};

/// Normal(0, std) tensor.
pub fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches data")
}

/// Glorot-normal weight for an affine map `rows -> cols`.
pub fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    normal(&[rows, cols], (2.0 / (rows + cols) as f64).sqrt(), rng)
}

pub fn filled(shape: &[usize], v: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![v; n]).expect("shape matches data")
}

/// Affine map `x W + b` (or `x W` when built without a bias).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        cols: usize,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<Linear> {
        Ok(Linear {
            w: store.add(format!("{name}.w"), glorot(rows, cols, rng), group, true)?,
            b: Some(store.add(format!("{name}.b"), Tensor::zeros(&[1, cols]), group, true)?),
        })
    }

    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        cols: usize,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<Linear> {
        Ok(Linear {
            w: store.add(format!("{name}.w"), glorot(rows, cols, rng), group, true)?,
            b: None,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b)?;
                g.affine(x, w, b)
            }
            None => g.matmul(x, w),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, group: ParamGroup) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), filled(&[1, width], 1.0), group, true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, width]), group, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Post-norm encoder layer: `h = LN(x + MHA(x))`, `out = LN(h + FFN(h))`
/// with a ReLU feed-forward block. The key projection has no bias: softmax
/// is invariant to it, so it would be a parameter with identically zero
/// gradient.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
    pub heads: usize,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        ff: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            q: Linear::new(store, &format!("{name}.q"), width, width, group, rng)?,
            k: Linear::without_bias(store, &format!("{name}.k"), width, width, group, rng)?,
            v: Linear::new(store, &format!("{name}.v"), width, width, group, rng)?,
            o: Linear::new(store, &format!("{name}.o"), width, width, group, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width, group)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), width, ff, group, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), ff, width, group, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width, group)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, key_mask: Option<&[bool]>) -> Result<NodeId> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let att = g.multi_head_attention(q, k, v, self.heads, key_mask)?;
        let att = self.o.forward(g, att)?;
        let res = g.add(x, att)?;
        let h = self.ln1.forward(g, res)?;
        let f = self.ff1.forward(g, h)?;
        let f = g.relu(f)?;
        let f = self.ff2.forward(g, f)?;
        let res = g.add(h, f)?;
        self.ln2.forward(g, res)
    }
}

/// Affine map to one logit followed by the logistic function.
pub fn score_head(g: &mut Graph, head: &Linear, x: NodeId) -> Result<NodeId> {
    let z = head.forward(g, x)?;
    g.logistic(z)
}
