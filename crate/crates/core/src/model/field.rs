//! Field-level interaction: a Transformer over a pooling slot, the projected
//! scale vector and the per-field `[SEP]` representations.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, ParamGroup, ParamId, ParamStore};

use super::config::ModelConfig;
use super::layers::{normal, score_head, Linear, TransformerLayer};

const GROUP: ParamGroup = ParamGroup::FieldLevel;

#[derive(Debug, Clone)]
pub struct FieldEncoder {
    /// Pooling vector `p`, `1 x d_e`.
    pub pool: ParamId,
    /// Projection of `c^s` into the field space; absent without scale.
    pub scale_proj: Option<Linear>,
    /// `n_slots x d_e`.
    pub slot_position: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub head: Linear,
    pub n_slots: usize,
}

/// Field-level outputs.
#[derive(Debug, Clone, Copy)]
pub struct FieldOutput {
    pub y: NodeId,
    pub score: NodeId,
}

impl FieldEncoder {
    /// `n_text_fields` counts every text slot that will be supplied.
    pub fn new(
        store: &mut ParamStore,
        n_text_fields: usize,
        with_scale: bool,
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<FieldEncoder> {
        let d = cfg.d_e;
        let n_slots = 1 + usize::from(with_scale) + n_text_fields;
        let pool = store.add("field.pool", normal(&[1, d], cfg.init_std, rng), GROUP, true)?;
        let scale_proj = if with_scale {
            Some(Linear::new(store, "field.scale_proj", cfg.d_s, d, GROUP, rng)?)
        } else {
            None
        };
        let slot_position = store.add("field.slot_position", normal(&[n_slots, d], cfg.init_std, rng), GROUP, true)?;
        let layers = (0..cfg.field_layers)
            .map(|l| TransformerLayer::new(store, &format!("field.layer{l}"), d, cfg.ff, cfg.heads, GROUP, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(store, "field.head", d, 1, GROUP, rng)?;
        Ok(FieldEncoder {
            pool,
            scale_proj,
            slot_position,
            layers,
            head,
            n_slots,
        })
    }

    /// Slots are `[p; l(c^s); blocks...]`, each block a `k x d_e` stack of
    /// field vectors. `Y` is the output at the pooling slot.
    pub fn forward(&self, g: &mut Graph, scale: Option<NodeId>, blocks: &[NodeId]) -> Result<FieldOutput> {
        let mut slots = vec![g.param(self.pool)?];
        match (&self.scale_proj, scale) {
            (Some(proj), Some(cs)) => slots.push(proj.forward(g, cs)?),
            (None, None) => {}
            _ => return Err(Error::invalid("field level: scale slot presence does not match the encoder")),
        }
        slots.extend_from_slice(blocks);
        let x = g.concat(&slots, 0)?;
        let rows = g.value(x).rows();
        if rows != self.n_slots {
            return Err(Error::invalid(format!(
                "field level: got {rows} slots, encoder expects {}",
                self.n_slots
            )));
        }
        let pos = g.param(self.slot_position)?;
        let mut x = g.add(x, pos)?;
        for layer in &self.layers {
            x = layer.forward(g, x, None)?;
        }
        let y = g.select_rows(x, &[0])?;
        let score = score_head(g, &self.head, y)?;
        Ok(FieldOutput { y, score })
    }
}
