//! Token-level encoder: word + position + field-aware embeddings, a stack of
//! Transformer layers, and a score head on the `[CLS]` output.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, ParamGroup, ParamId, ParamStore};
use crate::text::{TokenSequence, CLS_FIELD, PAD_FIELD};

use super::config::ModelConfig;
use super::layers::{normal, score_head, LayerNorm, Linear, TransformerLayer};

const GROUP: ParamGroup = ParamGroup::TokenLevel;

#[derive(Debug, Clone)]
pub struct TokenEncoder {
    pub prefix: String,
    pub word: ParamId,
    pub position: ParamId,
    /// `(fields + 1) x d_e`; row 0 belongs to `[CLS]`. Absent when field-aware
    /// embeddings are ablated.
    pub field_embedding: Option<ParamId>,
    pub embed_norm: LayerNorm,
    pub layers: Vec<TransformerLayer>,
    pub head: Linear,
    pub n_fields: usize,
    pub max_len: usize,
}

/// Encoder outputs for one sequence.
#[derive(Debug, Clone, Copy)]
pub struct TokenEncoding {
    /// All positions, `len x d_e`.
    pub tokens: NodeId,
    /// `[CLS]` output, `1 x d_e`.
    pub cls: NodeId,
    /// Outputs at each field's trailing `[SEP]`, `fields x d_e` in field order.
    pub seps: NodeId,
}

impl TokenEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        n_fields: usize,
        field_embeddings: bool,
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<TokenEncoder> {
        let d = cfg.d_e;
        let word = store.add(format!("{prefix}.word"), normal(&[vocab_size, d], cfg.init_std, rng), GROUP, true)?;
        let position = store.add(format!("{prefix}.position"), normal(&[cfg.max_len, d], cfg.init_std, rng), GROUP, true)?;
        let field_embedding = if field_embeddings {
            Some(store.add(format!("{prefix}.field"), normal(&[n_fields + 1, d], cfg.init_std, rng), GROUP, true)?)
        } else {
            None
        };
        let embed_norm = LayerNorm::new(store, &format!("{prefix}.embed_norm"), d, GROUP)?;
        let layers = (0..cfg.token_layers)
            .map(|l| TransformerLayer::new(store, &format!("{prefix}.layer{l}"), d, cfg.ff, cfg.heads, GROUP, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(store, &format!("{prefix}.head"), d, 1, GROUP, rng)?;
        Ok(TokenEncoder {
            prefix: prefix.to_string(),
            word,
            position,
            field_embedding,
            embed_norm,
            layers,
            head,
            n_fields,
            max_len: cfg.max_len,
        })
    }

    /// Input embeddings (`len x d_e`): word + position + field-aware.
    pub fn embed(&self, g: &mut Graph, seq: &TokenSequence) -> Result<NodeId> {
        let n = seq.len();
        if n > self.max_len {
            return Err(Error::invalid(format!(
                "{}: sequence of length {n} exceeds max_len {}",
                self.prefix, self.max_len
            )));
        }
        if seq.n_fields() != self.n_fields {
            return Err(Error::invalid(format!(
                "{}: sequence has {} fields, encoder expects {}",
                self.prefix,
                seq.n_fields(),
                self.n_fields
            )));
        }
        let word = g.param(self.word)?;
        let x = g.embedding_gather(word, &seq.token_ids)?;
        let pos = g.param(self.position)?;
        let positions: Vec<usize> = (0..n).collect();
        let p = g.embedding_gather(pos, &positions)?;
        let mut x = g.add(x, p)?;
        if let Some(fe) = self.field_embedding {
            let mut ids = Vec::with_capacity(n);
            for &f in &seq.field_ids {
                if f == PAD_FIELD {
                    ids.push(CLS_FIELD);
                } else if f > self.n_fields {
                    return Err(Error::invalid(format!(
                        "{}: field id {f} outside the field-embedding table (0..={})",
                        self.prefix, self.n_fields
                    )));
                } else {
                    ids.push(f);
                }
            }
            let table = g.param(fe)?;
            let e = g.embedding_gather(table, &ids)?;
            x = g.add(x, e)?;
        }
        self.embed_norm.forward(g, x)
    }

    pub fn encode(&self, g: &mut Graph, seq: &TokenSequence) -> Result<TokenEncoding> {
        let mut x = self.embed(g, seq)?;
        let padded = seq.real_len() < seq.len();
        let mask = padded.then_some(seq.attention_mask.as_slice());
        for layer in &self.layers {
            x = layer.forward(g, x, mask)?;
        }
        let cls = g.select_rows(x, &[0])?;
        let seps = g.select_rows(x, &seq.sep_positions)?;
        Ok(TokenEncoding { tokens: x, cls, seps })
    }

    /// `P = logistic(affine(cls))`.
    pub fn score(&self, g: &mut Graph, cls: NodeId) -> Result<NodeId> {
        score_head(g, &self.head, cls)
    }
}
