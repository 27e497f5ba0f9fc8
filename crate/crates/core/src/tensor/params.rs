use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use super::graph::Gradients;
use super::Tensor;
use crate::error::{Error, Result};

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    TokenLevel,
    Scale,
    FieldLevel,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::TokenLevel,
        ParamGroup::Scale,
        ParamGroup::FieldLevel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::TokenLevel => "token_level",
            ParamGroup::Scale => "scale",
            ParamGroup::FieldLevel => "field_level",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ParamGroup::TokenLevel => 0,
            ParamGroup::Scale => 1,
            ParamGroup::FieldLevel => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ParamGroup::TokenLevel),
            1 => Ok(ParamGroup::Scale),
            2 => Ok(ParamGroup::FieldLevel),
            other => Err(Error::Checkpoint(format!("unknown parameter group code {other}"))),
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token_level" => Ok(ParamGroup::TokenLevel),
            "scale" => Ok(ParamGroup::Scale),
            "field_level" => Ok(ParamGroup::FieldLevel),
            other => Err(Error::invalid(format!("unknown parameter group `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    pub group: ParamGroup,
    pub(crate) first_moment: Vec<f64>,
    pub(crate) second_moment: Vec<f64>,
    pub(crate) steps: u64,
}

impl Param {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first_moment, &self.second_moment)
    }
}

/// Named parameter tensors with their gradients and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        group: ParamGroup,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("parameter initialisation"));
        }
        let n = value.len();
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            grad: Tensor::zeros(value.shape()),
            name,
            value,
            trainable,
            group,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            steps: 0,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds a backward pass's gradients into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.dense() {
            let dst = self.params[id.0].grad.data_mut();
            for (d, s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
        for (id, sparse) in grads.sparse() {
            let dst = self.params[id.0].grad.data_mut();
            let w = sparse.width;
            for (r, g) in &sparse.rows {
                for (d, s) in dst[r * w..(r + 1) * w].iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Copies values for every parameter name present in `other`.
    /// Names missing from `self` are an error; shapes must agree.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for src in other.iter() {
            let id = self
                .id(&src.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", src.name)))?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != src.value.shape() {
                return Err(Error::Shape {
                    op: "load_values_from",
                    lhs: dst.value.shape().to_vec(),
                    rhs: src.value.shape().to_vec(),
                });
            }
            dst.value = src.value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Rounds every value to the nearest `f32`, the precision checkpoints store.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Clears Adam moments and step counts, as for a freshly built optimizer.
    pub fn reset_optimizer(&mut self) {
        for p in &mut self.params {
            p.first_moment.iter_mut().for_each(|m| *m = 0.0);
            p.second_moment.iter_mut().for_each(|v| *v = 0.0);
            p.steps = 0;
        }
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
