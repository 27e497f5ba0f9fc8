//! Supervised fine-tuning with the joint loss, ranking and evaluation.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;

use crate::data::{CompanyRecord, MatchExample, SolutionRecord};
use crate::error::{Error, Result};
use crate::eval::{sort_ranking, MetricsReport, ReportMeta, SolutionMetrics};
use crate::model::{Matcher, PairInputs};
use crate::rng::sub_rng;
use crate::tensor::{AdamConfig, Graph, GroupRates, ParamGroup, ParamStore};
use crate::text::Vocab;

const SHUFFLE_STREAM: u64 = 31;

/// Id lookup over solution and company records.
pub struct RecordIndex<'a> {
    solutions: HashMap<&'a str, &'a SolutionRecord>,
    companies: HashMap<&'a str, &'a CompanyRecord>,
}

impl<'a> RecordIndex<'a> {
    pub fn new(solutions: &'a [SolutionRecord], companies: &'a [CompanyRecord]) -> Self {
        RecordIndex {
            solutions: solutions.iter().map(|s| (s.id.as_str(), s)).collect(),
            companies: companies.iter().map(|c| (c.id.as_str(), c)).collect(),
        }
    }

    pub fn solution(&self, id: &str) -> Result<&'a SolutionRecord> {
        self.solutions
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown solution `{id}`")))
    }

    pub fn company(&self, id: &str) -> Result<&'a CompanyRecord> {
        self.companies
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown company `{id}`")))
    }
}

/// A labelled pair with its model inputs assembled.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub solution_id: String,
    pub company_id: String,
    pub inputs: PairInputs,
    pub label: u8,
}

pub fn prepare_examples(
    matcher: &Matcher,
    examples: &[MatchExample],
    records: &RecordIndex<'_>,
    vocab: &Vocab,
) -> Result<Vec<Prepared>> {
    examples
        .iter()
        .map(|e| {
            let s = records.solution(&e.solution_id)?;
            let c = records.company(&e.company_id)?;
            Ok(Prepared {
                solution_id: e.solution_id.clone(),
                company_id: e.company_id.clone(),
                inputs: matcher.prepare(s, c, vocab)?,
                label: e.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_token: f64,
    pub lr_scale: f64,
    pub lr_field: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch: 32,
            lr_token: 3e-5,
            lr_scale: 5e-4,
            lr_field: 5e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        for (name, lr) in [
            ("lr_token", self.lr_token),
            ("lr_scale", self.lr_scale),
            ("lr_field", self.lr_field),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn rates(&self) -> GroupRates {
        GroupRates::new()
            .with(ParamGroup::TokenLevel, self.lr_token)
            .with(ParamGroup::Scale, self.lr_scale)
            .with(ParamGroup::FieldLevel, self.lr_field)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean joint loss over each epoch's examples.
    pub epoch_losses: Vec<f64>,
    /// Validation MAP after each epoch.
    pub val_map: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

/// Mini-batch Adam on the joint loss over shuffled examples. After each
/// epoch the validation MAP is measured; the best epoch's parameters (first
/// on ties) are restored at the end and rounded to `f32`, the checkpoint
/// precision. With zero epochs the store is left untouched.
pub fn train(
    store: &mut ParamStore,
    matcher: &Matcher,
    train_set: &[Prepared],
    val_set: &[Prepared],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let rates = cfg.rates();
    let adam = AdamConfig::default();
    store.reset_optimizer();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut sub_rng(cfg.seed, SHUFFLE_STREAM, epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            store.zero_grad();
            for &i in chunk {
                let ex = &train_set[i];
                let grads = {
                    let mut g = Graph::new(store);
                    let loss = matcher.example_loss(&mut g, &ex.inputs, ex.label)?;
                    total += g.value(loss).item();
                    g.backward(loss)?
                };
                store.accumulate(&grads);
            }
            store.scale_grads(1.0 / chunk.len() as f64);
            store.adam_step(&rates, &adam)?;
        }
        store.zero_grad();
        report.epoch_losses.push(total / train_set.len() as f64);
        let val = evaluate_solutions(matcher, store, val_set)?;
        let map = MetricsReport::from_solutions(ReportMeta::default(), val).map();
        report.val_map.push(map);
        log::info!(
            "epoch {}: train loss {:.6}, validation MAP {:.6}",
            epoch + 1,
            report.epoch_losses[epoch],
            map
        );
        if best.as_ref().map_or(true, |(b, _)| map > *b) {
            best = Some((map, store.clone()));
            report.best_epoch = Some(epoch + 1);
        }
    }
    if let Some((_, snapshot)) = best {
        store.load_values_from(&snapshot)?;
    }
    store.reset_optimizer();
    store.round_to_f32();
    Ok(report)
}

/// Companies ranked for one solution by combined score, descending, ties by
/// ascending company id.
pub fn rank_companies(
    matcher: &Matcher,
    store: &ParamStore,
    solution: &SolutionRecord,
    companies: &[&CompanyRecord],
    vocab: &Vocab,
) -> Result<Vec<(String, f64)>> {
    let mut ranked = Vec::with_capacity(companies.len());
    for c in companies {
        let x = matcher.prepare(solution, c, vocab)?;
        ranked.push((c.id.clone(), matcher.scores(store, &x)?.combined, ()));
    }
    sort_ranking(&mut ranked);
    Ok(ranked.into_iter().map(|(id, s, ())| (id, s)).collect())
}

/// Scores every prepared pair and computes per-solution metrics, ordered by
/// solution id.
pub fn evaluate_solutions(matcher: &Matcher, store: &ParamStore, set: &[Prepared]) -> Result<Vec<SolutionMetrics>> {
    let mut pools: BTreeMap<&str, Vec<(String, f64, u8)>> = BTreeMap::new();
    for ex in set {
        let score = matcher.scores(store, &ex.inputs)?.combined;
        pools
            .entry(ex.solution_id.as_str())
            .or_default()
            .push((ex.company_id.clone(), score, ex.label));
    }
    Ok(pools
        .into_iter()
        .map(|(sid, cands)| SolutionMetrics::compute(sid, cands))
        .collect())
}

pub fn evaluate(matcher: &Matcher, store: &ParamStore, test_set: &[Prepared], meta: ReportMeta) -> Result<MetricsReport> {
    Ok(MetricsReport::from_solutions(meta, evaluate_solutions(matcher, store, test_set)?))
}

/// Expected average precision of a uniformly random ranking of `n` items
/// holding `r ≥ 1` positives:
/// `(1/n) · (H_n + (r − 1)/(n − 1) · (n − H_n))`.
pub fn random_average_precision(n: usize, r: usize) -> Result<f64> {
    if r == 0 || r > n {
        return Err(Error::invalid(format!("need 1 ≤ positives ≤ items, got {r} of {n}")));
    }
    if n == 1 {
        return Ok(1.0);
    }
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let nf = n as f64;
    Ok((h + (r as f64 - 1.0) / (nf - 1.0) * (nf - h)) / nf)
}

/// MAP of a random ranking over the same per-solution pools.
pub fn random_baseline_map(set: &[Prepared]) -> Result<f64> {
    let mut pools: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for ex in set {
        let e = pools.entry(ex.solution_id.as_str()).or_insert((0, 0));
        e.0 += 1;
        e.1 += usize::from(ex.label == 1);
    }
    let aps: Vec<f64> = pools
        .values()
        .filter(|(_, r)| *r > 0)
        .map(|&(n, r)| random_average_precision(n, r))
        .collect::<Result<_>>()?;
    if aps.is_empty() {
        return Err(Error::invalid("no solution has a positive candidate"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_ap_small_cases() {
        // n = 2, r = 1: ranks 1 and 2 equally likely → (1 + 1/2) / 2.
        assert!((random_average_precision(2, 1).unwrap() - 0.75).abs() < 1e-15);
        assert!((random_average_precision(5, 5).unwrap() - 1.0).abs() < 1e-15);
        assert!(random_average_precision(3, 0).is_err());
    }
}
