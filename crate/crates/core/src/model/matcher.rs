//! The full matcher: scale encoder, token-level encoders, field-level
//! interaction, the four match scores and the joint loss.

use crate::data::{CompanyRecord, FieldSchema, SolutionRecord};
use crate::error::{Error, Result};
use crate::rng::sub_rng;
use crate::tensor::{Graph, NodeId, ParamStore, BCE_CLAMP};
use crate::text::{assemble_attribute, assemble_combined, assemble_description, TokenSequence, Vocab};

use super::config::{ModelConfig, Variant};
use super::field::FieldEncoder;
use super::scale::{ScaleEncoder, ScaleInput};
use super::token::TokenEncoder;

const INIT_STREAM: u64 = 0x696e_6974;

/// Everything the matcher consumes for one (solution, company) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInputs {
    pub desc: Option<TokenSequence>,
    pub attr: Option<TokenSequence>,
    pub text: Option<TokenSequence>,
    pub scale: Option<ScaleInput>,
}

/// Score nodes recorded on a graph; absent components are `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreNodes {
    pub scale: Option<NodeId>,
    pub desc: Option<NodeId>,
    pub attr: Option<NodeId>,
    pub text: Option<NodeId>,
    pub field: Option<NodeId>,
    /// `[CLS]` outputs of the token encoders, used by pretraining.
    pub desc_cls: Option<NodeId>,
    pub attr_cls: Option<NodeId>,
}

impl ScoreNodes {
    pub fn present(&self) -> Vec<NodeId> {
        [self.scale, self.desc, self.attr, self.text, self.field]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// Match probabilities for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchScores {
    pub scale: Option<f64>,
    pub desc: Option<f64>,
    pub attr: Option<f64>,
    /// Single text score when both groups share one encoder.
    pub text: Option<f64>,
    pub field: Option<f64>,
    /// Arithmetic mean of the present probabilities.
    pub combined: f64,
}

impl MatchScores {
    pub fn from_parts(
        scale: Option<f64>,
        desc: Option<f64>,
        attr: Option<f64>,
        text: Option<f64>,
        field: Option<f64>,
    ) -> Result<MatchScores> {
        let present: Vec<f64> = [scale, desc, attr, text, field].into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::invalid("match scores: no component produced a score"));
        }
        let combined = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MatchScores {
            scale,
            desc,
            attr,
            text,
            field,
            combined,
        })
    }

    pub fn present(&self) -> Vec<f64> {
        [self.scale, self.desc, self.attr, self.text, self.field]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// Joint binary cross-entropy summed over each pair's scores and averaged
/// over pairs. Probabilities are clamped `1e-7` away from 0 and 1.
pub fn joint_loss(scores: &[MatchScores], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "joint_loss: {} score sets but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::invalid("joint_loss: empty batch"));
    }
    let mut total = 0.0;
    for (s, &y) in scores.iter().zip(labels) {
        if y > 1 {
            return Err(Error::invalid(format!("joint_loss: label {y} is not 0 or 1")));
        }
        for p in s.present() {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
        }
    }
    Ok(total / scores.len() as f64)
}

#[derive(Debug, Clone)]
pub struct Matcher {
    pub cfg: ModelConfig,
    pub schema: FieldSchema,
    pub variant: Variant,
    pub desc: Option<TokenEncoder>,
    pub attr: Option<TokenEncoder>,
    pub text: Option<TokenEncoder>,
    pub scale: Option<ScaleEncoder>,
    pub field: Option<FieldEncoder>,
}

impl Matcher {
    /// Registers every parameter of the variant in `store`. Each component
    /// draws its initial values from its own seed stream, so variants share
    /// the initialisation of the components they have in common.
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        schema: &FieldSchema,
        vocab_size: usize,
        variant: Variant,
        seed: u64,
    ) -> Result<Matcher> {
        cfg.validate()?;
        schema.validate()?;
        let fe = variant.field_embeddings;
        let n_desc = schema.num_desc_fields();
        let n_attr = schema.num_attr_fields();
        let (desc, attr, text) = if variant.combined_text {
            let mut rng = sub_rng(seed, INIT_STREAM, 3);
            let t = TokenEncoder::new(store, "text", vocab_size, n_desc + n_attr, fe, cfg, &mut rng)?;
            (None, None, Some(t))
        } else {
            let desc = if variant.desc {
                let mut rng = sub_rng(seed, INIT_STREAM, 1);
                Some(TokenEncoder::new(store, "desc", vocab_size, n_desc, fe, cfg, &mut rng)?)
            } else {
                None
            };
            let attr = if variant.attr {
                let mut rng = sub_rng(seed, INIT_STREAM, 2);
                Some(TokenEncoder::new(store, "attr", vocab_size, n_attr, fe, cfg, &mut rng)?)
            } else {
                None
            };
            (desc, attr, None)
        };
        let scale = if variant.scale {
            let mut rng = sub_rng(seed, INIT_STREAM, 4);
            Some(ScaleEncoder::new(store, schema, cfg, &mut rng)?)
        } else {
            None
        };
        let field = if variant.field_level {
            let n_text = usize::from(variant.desc) * n_desc + usize::from(variant.attr) * n_attr;
            let mut rng = sub_rng(seed, INIT_STREAM, 5);
            Some(FieldEncoder::new(store, n_text, variant.scale, cfg, &mut rng)?)
        } else {
            None
        };
        Ok(Matcher {
            cfg: cfg.clone(),
            schema: schema.clone(),
            variant,
            desc,
            attr,
            text,
            scale,
            field,
        })
    }

    pub fn prepare(&self, s: &SolutionRecord, c: &CompanyRecord, vocab: &Vocab) -> Result<PairInputs> {
        let max_len = self.cfg.max_len;
        Ok(PairInputs {
            desc: self
                .desc
                .as_ref()
                .map(|_| assemble_description(s, c, &self.schema, vocab, max_len))
                .transpose()?,
            attr: self
                .attr
                .as_ref()
                .map(|_| assemble_attribute(s, c, &self.schema, vocab, max_len))
                .transpose()?,
            text: self
                .text
                .as_ref()
                .map(|_| assemble_combined(s, c, &self.schema, vocab, max_len))
                .transpose()?,
            scale: self
                .scale
                .as_ref()
                .map(|_| ScaleInput::from_company(c, &self.schema))
                .transpose()?,
        })
    }

    fn require<'a, T>(x: &'a Option<T>, what: &str) -> Result<&'a T> {
        x.as_ref()
            .ok_or_else(|| Error::invalid(format!("matcher input lacks the {what} component")))
    }

    /// Records the forward pass for one pair.
    pub fn forward(&self, g: &mut Graph, x: &PairInputs) -> Result<ScoreNodes> {
        let mut out = ScoreNodes::default();
        let mut cs = None;
        if let Some(enc) = &self.scale {
            let v = enc.encode(g, Self::require(&x.scale, "scale")?)?;
            out.scale = Some(enc.score(g, v)?);
            cs = Some(v);
        }
        let mut blocks = Vec::new();
        let sd = self.schema.desc_fields_solution.len();
        let sa = self.schema.attr_fields_solution.len();
        let cd = self.schema.desc_fields_company.len();
        let ca = self.schema.attr_fields_company.len();
        if let Some(enc) = &self.desc {
            let e = enc.encode(g, Self::require(&x.desc, "description")?)?;
            out.desc = Some(enc.score(g, e.cls)?);
            out.desc_cls = Some(e.cls);
            blocks.push(e.seps);
        }
        if let Some(enc) = &self.attr {
            let e = enc.encode(g, Self::require(&x.attr, "attribute")?)?;
            out.attr = Some(enc.score(g, e.cls)?);
            out.attr_cls = Some(e.cls);
            blocks.push(e.seps);
        }
        if let Some(enc) = &self.text {
            let e = enc.encode(g, Self::require(&x.text, "combined text")?)?;
            out.text = Some(enc.score(g, e.cls)?);
            // Sequence order is [s^d, s^a, c^d, c^a]; slots want [s^d, c^d, s^a, c^a].
            let order: Vec<usize> = (0..sd)
                .chain(sd + sa..sd + sa + cd)
                .chain(sd..sd + sa)
                .chain(sd + sa + cd..sd + sa + cd + ca)
                .collect();
            blocks.push(g.select_rows(e.seps, &order)?);
        }
        if let Some(enc) = &self.field {
            out.field = Some(enc.forward(g, cs, &blocks)?.score);
        }
        Ok(out)
    }

    /// Sum of the binary cross-entropies of every present score for one pair.
    pub fn example_loss(&self, g: &mut Graph, x: &PairInputs, label: u8) -> Result<NodeId> {
        if label > 1 {
            return Err(Error::invalid(format!("label {label} is not 0 or 1")));
        }
        let nodes = self.forward(g, x)?.present();
        let row = g.concat(&nodes, 1)?;
        let bce = g.binary_cross_entropy(row, &vec![f64::from(label); nodes.len()])?;
        g.sum(bce)
    }

    /// Joint loss over a batch recorded on one graph (for gradient checks;
    /// training accumulates per-example graphs instead).
    pub fn batch_loss(&self, g: &mut Graph, batch: &[(&PairInputs, u8)]) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::invalid("batch_loss: empty batch"));
        }
        let mut losses = Vec::with_capacity(batch.len());
        for (x, y) in batch {
            losses.push(self.example_loss(g, x, *y)?);
        }
        let all = g.concat(&losses, 1)?;
        g.mean(all)
    }

    pub fn scores(&self, store: &ParamStore, x: &PairInputs) -> Result<MatchScores> {
        let mut g = Graph::new(store);
        let n = self.forward(&mut g, x)?;
        let v = |id: Option<NodeId>| id.map(|i| g.value(i).item());
        MatchScores::from_parts(v(n.scale), v(n.desc), v(n.attr), v(n.text), v(n.field))
    }

    /// Scores each pair independently.
    pub fn score_batch(&self, store: &ParamStore, xs: &[PairInputs]) -> Result<Vec<MatchScores>> {
        xs.iter().map(|x| self.scores(store, x)).collect()
    }
}
