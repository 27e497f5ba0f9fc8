//! Company scale features: look-up embeddings for categorical fields, soft
//! discretization for numeric fields, an MLP fusing both into `c^s`, and the
//! scale score head.

use crate::data::{CompanyRecord, FieldSchema};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, ParamGroup, ParamId, ParamStore, Tensor};

use super::config::ModelConfig;
use super::layers::{filled, glorot, normal, score_head, Linear};

pub const LEAKY_SLOPE: f64 = 0.01;
const GROUP: ParamGroup = ParamGroup::Scale;

/// Scale features of one company in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleInput {
    pub categorical: Vec<usize>,
    pub numeric: Vec<f64>,
}

impl ScaleInput {
    pub fn from_company(c: &CompanyRecord, schema: &FieldSchema) -> Result<ScaleInput> {
        let categorical = schema
            .categorical_fields
            .iter()
            .map(|f| {
                let v = *c.categorical.get(&f.name).ok_or_else(|| {
                    Error::invalid(format!("company `{}` lacks scale feature `{}`", c.id, f.name))
                })?;
                if v >= f.cardinality {
                    return Err(Error::invalid(format!(
                        "company `{}`: category {v} of `{}` outside [0, {})",
                        c.id, f.name, f.cardinality
                    )));
                }
                Ok(v)
            })
            .collect::<Result<_>>()?;
        let numeric = schema
            .numeric_fields
            .iter()
            .map(|f| {
                let v = *c.numeric.get(f).ok_or_else(|| {
                    Error::invalid(format!("company `{}` lacks scale feature `{f}`", c.id))
                })?;
                if !v.is_finite() {
                    return Err(Error::invalid(format!("company `{}`: `{f}` is not finite", c.id)));
                }
                Ok(v)
            })
            .collect::<Result<_>>()?;
        Ok(ScaleInput { categorical, numeric })
    }
}

/// Per-numeric-field standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ScaleStats {
    pub fn identity(n: usize) -> ScaleStats {
        ScaleStats {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Mean and population standard deviation per field; a constant field
    /// gets std 1 so standardization stays finite.
    pub fn fit(inputs: &[ScaleInput], n_numeric: usize) -> ScaleStats {
        if inputs.is_empty() {
            return ScaleStats::identity(n_numeric);
        }
        let n = inputs.len() as f64;
        let mut mean = vec![0.0; n_numeric];
        for x in inputs {
            for (m, v) in mean.iter_mut().zip(&x.numeric) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; n_numeric];
        for x in inputs {
            for ((s, v), m) in var.iter_mut().zip(&x.numeric).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        ScaleStats { mean, std }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NumericField {
    /// `1 x H` bucket projection.
    pub w: ParamId,
    /// `H x H` bucket mixing matrix.
    pub mix: ParamId,
    /// `H x d_s` meta-embeddings.
    pub meta: ParamId,
}

#[derive(Debug, Clone)]
pub struct ScaleEncoder {
    pub categorical: Vec<ParamId>,
    pub numeric: Vec<NumericField>,
    pub stats_mean: ParamId,
    pub stats_std: ParamId,
    pub fuse1: Linear,
    pub fuse2: Linear,
    pub head: Linear,
    pub alpha: f64,
    pub d_s: usize,
}

impl ScaleEncoder {
    pub fn new(
        store: &mut ParamStore,
        schema: &FieldSchema,
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<ScaleEncoder> {
        let d_s = cfg.d_s;
        let h = cfg.buckets;
        let categorical = schema
            .categorical_fields
            .iter()
            .enumerate()
            .map(|(i, f)| {
                store.add(format!("scale.cat{i}"), normal(&[f.cardinality, d_s], cfg.init_std, rng), GROUP, true)
            })
            .collect::<Result<Vec<_>>>()?;
        let numeric = (0..schema.numeric_fields.len())
            .map(|j| {
                Ok(NumericField {
                    w: store.add(format!("scale.num{j}.w"), normal(&[1, h], 1.0, rng), GROUP, true)?,
                    mix: store.add(format!("scale.num{j}.mix"), glorot(h, h, rng), GROUP, true)?,
                    meta: store.add(format!("scale.num{j}.meta"), normal(&[h, d_s], cfg.init_std, rng), GROUP, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n_num = numeric.len();
        let stats_mean = store.add("scale.stats.mean", Tensor::zeros(&[1, n_num.max(1)]), GROUP, false)?;
        let stats_std = store.add("scale.stats.std", filled(&[1, n_num.max(1)], 1.0), GROUP, false)?;
        let width = (categorical.len() + n_num) * d_s;
        if width == 0 {
            return Err(Error::Config("scale encoder needs at least one scale feature".into()));
        }
        Ok(ScaleEncoder {
            fuse1: Linear::new(store, "scale.fuse1", width, 2 * d_s, GROUP, rng)?,
            fuse2: Linear::new(store, "scale.fuse2", 2 * d_s, d_s, GROUP, rng)?,
            head: Linear::new(store, "scale.head", d_s, 1, GROUP, rng)?,
            categorical,
            numeric,
            stats_mean,
            stats_std,
            alpha: cfg.alpha,
            d_s,
        })
    }

    pub fn set_stats(&self, store: &mut ParamStore, stats: &ScaleStats) -> Result<()> {
        if stats.mean.len() != self.numeric.len() || stats.std.len() != self.numeric.len() {
            return Err(Error::invalid("scale statistics do not match the numeric fields"));
        }
        if !self.numeric.is_empty() {
            *store.value_mut(self.stats_mean) = Tensor::row(stats.mean.clone());
            *store.value_mut(self.stats_std) = Tensor::row(stats.std.clone());
        }
        Ok(())
    }

    pub fn stats(&self, store: &ParamStore) -> ScaleStats {
        let n = self.numeric.len();
        ScaleStats {
            mean: store.value(self.stats_mean).data()[..n].to_vec(),
            std: store.value(self.stats_std).data()[..n].to_vec(),
        }
    }

    /// Row `index` of the field's embedding table.
    pub fn encode_categorical(&self, g: &mut Graph, field: usize, index: usize) -> Result<NodeId> {
        let id = *self
            .categorical
            .get(field)
            .ok_or_else(|| Error::invalid(format!("no categorical field {field}")))?;
        let table = g.param(id)?;
        let rows = g.value(table).rows();
        if index >= rows {
            return Err(Error::invalid(format!(
                "category {index} outside [0, {rows}) for categorical field {field}"
            )));
        }
        g.embedding_gather(table, &[index])
    }

    /// Soft discretization of an already-standardized scalar node `v`
    /// (`1 x 1`): `h = LeakyReLU(v w)`, `u = h Wᵀ + α h`,
    /// `e = softmax(u) · ME`.
    pub fn autodis(&self, g: &mut Graph, field: usize, v: NodeId) -> Result<NodeId> {
        let f = *self
            .numeric
            .get(field)
            .ok_or_else(|| Error::invalid(format!("no numeric field {field}")))?;
        let w = g.param(f.w)?;
        let mix = g.param(f.mix)?;
        let meta = g.param(f.meta)?;
        let pre = g.matmul(v, w)?;
        let h = g.leaky_relu(pre, LEAKY_SLOPE)?;
        let mixed = g.matmul_t(h, mix)?;
        let skip = g.scale(h, self.alpha)?;
        let logits = g.add(mixed, skip)?;
        let weights = g.softmax(logits, 1)?;
        g.matmul(weights, meta)
    }

    /// Fused scale representation `c^s` (`1 x d_s`).
    pub fn encode(&self, g: &mut Graph, x: &ScaleInput) -> Result<NodeId> {
        if x.categorical.len() != self.categorical.len() || x.numeric.len() != self.numeric.len() {
            return Err(Error::invalid(format!(
                "scale input has {}+{} features, encoder expects {}+{}",
                x.categorical.len(),
                x.numeric.len(),
                self.categorical.len(),
                self.numeric.len()
            )));
        }
        let mut parts = Vec::with_capacity(x.categorical.len() + x.numeric.len());
        for (i, &c) in x.categorical.iter().enumerate() {
            parts.push(self.encode_categorical(g, i, c)?);
        }
        let mean = g.store().value(self.stats_mean).data().to_vec();
        let std = g.store().value(self.stats_std).data().to_vec();
        for (j, &v) in x.numeric.iter().enumerate() {
            let z = g.input(Tensor::row(vec![(v - mean[j]) / std[j]]))?;
            parts.push(self.autodis(g, j, z)?);
        }
        let joined = g.concat(&parts, 1)?;
        let hidden = self.fuse1.forward(g, joined)?;
        let hidden = g.leaky_relu(hidden, LEAKY_SLOPE)?;
        self.fuse2.forward(g, hidden)
    }

    /// `P_scale = logistic(affine(c^s))`.
    pub fn score(&self, g: &mut Graph, cs: NodeId) -> Result<NodeId> {
        score_head(g, &self.head, cs)
    }
}
