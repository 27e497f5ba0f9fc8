//! Contrastive pretraining of the token-level encoders: two augmented views
//! per pair, in-batch InfoNCE over cosine similarities.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::augment::{Augmenter, PairRef, Strategy};
use crate::error::{Error, Result};
use crate::model::TokenEncoder;
use crate::rng::{sub_rng, Rng};
use crate::tensor::{AdamConfig, Graph, GroupRates, NodeId, ParamStore, Tensor};
use crate::text::TokenSequence;

const SHUFFLE_STREAM: u64 = 21;
const AUGMENT_STREAM: u64 = 22;

/// `2M` views ordered so that views `2i` and `2i + 1` come from pair `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub views: Vec<TokenSequence>,
    pub pair_index: Vec<usize>,
    pub strategies: Vec<Option<Strategy>>,
}

impl ContrastiveBatch {
    pub fn num_pairs(&self) -> usize {
        self.views.len() / 2
    }
}

pub fn build_contrastive_batch(augmenter: &Augmenter<'_>, pairs: &[PairRef<'_>], rng: &mut Rng) -> Result<ContrastiveBatch> {
    let mut views = Vec::with_capacity(2 * pairs.len());
    let mut pair_index = Vec::with_capacity(2 * pairs.len());
    let mut strategies = Vec::with_capacity(2 * pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let out = augmenter.augment_pair(*pair, rng)?;
        views.extend(out.views);
        strategies.extend(out.strategies);
        pair_index.extend([i, i]);
    }
    Ok(ContrastiveBatch {
        views,
        pair_index,
        strategies,
    })
}

/// For each view, the index of the other view of the same pair. Every pair
/// must own exactly two views.
pub fn partners(pair_index: &[usize]) -> Result<Vec<usize>> {
    let mut partner = vec![usize::MAX; pair_index.len()];
    for i in 0..pair_index.len() {
        let mates: Vec<usize> = (0..pair_index.len())
            .filter(|&j| j != i && pair_index[j] == pair_index[i])
            .collect();
        if mates.len() != 1 {
            return Err(Error::invalid(format!(
                "pair {} has {} views; exactly 2 are required",
                pair_index[i],
                mates.len() + 1
            )));
        }
        partner[i] = mates[0];
    }
    Ok(partner)
}

/// InfoNCE over the rows of `reps` (`2M x d`): for view `i` with partner `j`,
/// `−log φ(i,j) / (φ(i,j) + Σ_{k ∉ pair(i)} φ(i,k))` with
/// `φ = exp(cos / τ)`, averaged over all `2M` views.
pub fn info_nce_loss(g: &mut Graph, reps: NodeId, pair_index: &[usize], tau: f64) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let n = g.value(reps).rows();
    if n != pair_index.len() {
        return Err(Error::invalid(format!(
            "info_nce_loss: {n} representations but {} pair indices",
            pair_index.len()
        )));
    }
    let partner = partners(pair_index)?;
    let sim = g.cosine_similarity(reps, reps)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let mask: Vec<bool> = (0..n * n).map(|p| p / n != p % n).collect();
    let log_p = g.log_softmax_masked(logits, &mask)?;
    let positions: Vec<usize> = (0..n).map(|i| i * n + partner[i]).collect();
    let picked = g.pick(log_p, &positions)?;
    let mean = g.mean(picked)?;
    g.scale(mean, -1.0)
}

/// Value of [`info_nce_loss`] for fixed representations.
pub fn info_nce(reps: &Tensor, pair_index: &[usize], tau: f64) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let r = g.input(reps.clone())?;
    let loss = info_nce_loss(&mut g, r, pair_index, tau)?;
    Ok(g.value(loss).item())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub tau: f64,
    pub epochs: usize,
    /// Pairs per batch (`M`).
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("pretraining batch size must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainReport {
    pub encoder: String,
    /// `(global step, batch loss)`.
    pub steps: Vec<(usize, f64)>,
    pub epoch_means: Vec<f64>,
}

impl PretrainReport {
    /// Tab-separated `step loss` lines under a header.
    pub fn store_curve(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step\tloss\n");
        for (step, loss) in &self.steps {
            writeln!(out, "{step}\t{loss}").expect("write to string");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Restricts training to parameters under `prefix` for the lifetime of the
/// guard, restoring the previous flags afterwards.
struct TrainableScope<'s> {
    store: &'s mut ParamStore,
    saved: Vec<bool>,
}

impl<'s> TrainableScope<'s> {
    fn new(store: &'s mut ParamStore, prefix: &str) -> Self {
        let saved = store.iter().map(|p| p.trainable).collect();
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            p.trainable = p.trainable && p.name.starts_with(prefix);
        }
        TrainableScope { store, saved }
    }
}

impl Drop for TrainableScope<'_> {
    fn drop(&mut self) {
        for (id, t) in self.store.ids().collect::<Vec<_>>().into_iter().zip(&self.saved) {
            self.store.get_mut(id).trainable = *t;
        }
    }
}

/// Runs `epochs × ⌈pairs / M⌉` steps of augment → encode → InfoNCE → Adam on
/// the parameters of `encoder` only. The optimizer state is cleared before and
/// after, so fine-tuning starts with a fresh optimizer.
pub fn pretrain_encoder(
    store: &mut ParamStore,
    encoder: &TokenEncoder,
    augmenter: &Augmenter<'_>,
    pairs: &[PairRef<'_>],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("pretraining needs at least one pair"));
    }
    let mut report = PretrainReport {
        encoder: encoder.prefix.clone(),
        ..PretrainReport::default()
    };
    let rates = GroupRates::uniform(cfg.lr);
    let adam = AdamConfig::default();
    store.reset_optimizer();
    {
        let scope = TrainableScope::new(store, &format!("{}.", encoder.prefix));
        let store = &mut *scope.store;
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut sub_rng(cfg.seed, SHUFFLE_STREAM, epoch as u64));
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch) {
                let batch_pairs: Vec<PairRef<'_>> = chunk.iter().map(|&i| pairs[i]).collect();
                let mut rng = sub_rng(cfg.seed, AUGMENT_STREAM, step as u64);
                let batch = build_contrastive_batch(augmenter, &batch_pairs, &mut rng)?;
                let grads = {
                    let mut g = Graph::new(store);
                    let mut cls = Vec::with_capacity(batch.views.len());
                    for v in &batch.views {
                        cls.push(encoder.encode(&mut g, v)?.cls);
                    }
                    let reps = g.concat(&cls, 0)?;
                    let loss = info_nce_loss(&mut g, reps, &batch.pair_index, cfg.tau)?;
                    let value = g.value(loss).item();
                    report.steps.push((step, value));
                    total += value;
                    g.backward(loss)?
                };
                store.zero_grad();
                store.accumulate(&grads);
                store.adam_step(&rates, &adam)?;
                step += 1;
                batches += 1;
            }
            report.epoch_means.push(total / batches as f64);
            log::info!(
                "pretrain {} epoch {}: mean loss {:.6}",
                encoder.prefix,
                epoch + 1,
                report.epoch_means[epoch]
            );
        }
        store.zero_grad();
    }
    store.reset_optimizer();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partner_lookup() {
        assert_eq!(partners(&[0, 0, 1, 1]).unwrap(), vec![1, 0, 3, 2]);
        assert!(partners(&[0, 0, 0, 1]).is_err());
        assert!(partners(&[0, 1]).is_err());
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let reps = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        assert_eq!(info_nce(&reps, &[0, 0], 0.7).unwrap(), 0.0);
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let reps = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert!(info_nce(&reps, &[0, 0], 0.0).is_err());
        assert!(info_nce(&reps, &[0, 0], -1.0).is_err());
    }
}
