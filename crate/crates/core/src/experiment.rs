//! End-to-end runs: data preparation, model construction, pretraining,
//! fine-tuning, evaluation, ablations and sweeps.

use std::collections::BTreeSet;

use crate::augment::{Augmenter, PairRef, SimilarityIndex};
use crate::config::ExperimentConfig;
use crate::data::{build_examples, CompanyRecord, FieldSchema, MatchExample, SolutionRecord};
use crate::error::{Error, Result};
use crate::eval::{MetricsReport, ReportMeta};
use crate::model::{Ablation, Matcher, ScaleInput, ScaleStats, TokenEncoder, Variant};
use crate::pretrain::{pretrain_encoder, PretrainConfig, PretrainReport};
use crate::rng::derive_seed;
use crate::synth::generate_corpus;
use crate::tensor::ParamStore;
use crate::text::{build_vocab, SeqGroup, Vocab};
use crate::train::{evaluate, prepare_examples, random_baseline_map, train, Prepared, RecordIndex, TrainReport};

const PRETRAIN_STREAM: u64 = 41;

/// Pool construction recorded in every report.
pub const POOL: &str = "labeled: positives plus sampled negatives per solution";

/// Records, vocabulary and labelled splits of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub schema: FieldSchema,
    pub solutions: Vec<SolutionRecord>,
    pub companies: Vec<CompanyRecord>,
    pub vocab: Vocab,
    pub train: Vec<MatchExample>,
    pub val: Vec<MatchExample>,
    pub test: Vec<MatchExample>,
}

impl ExperimentData {
    /// Generates the synthetic corpus, pairwise examples, split and vocabulary.
    pub fn generate(cfg: &ExperimentConfig) -> Result<ExperimentData> {
        let corpus = generate_corpus(&cfg.synth)?;
        let examples = build_examples(&corpus.positives, &corpus.companies, cfg.negatives_per_positive, cfg.seed)?;
        let (train, val, test) = crate::data::split_dataset(&examples, cfg.split, cfg.seed)?;
        let vocab = build_vocab(&corpus.solutions, &corpus.companies, cfg.vocab_min_count);
        Ok(ExperimentData {
            schema: corpus.schema,
            solutions: corpus.solutions,
            companies: corpus.companies,
            vocab,
            train,
            val,
            test,
        })
    }

    pub fn records(&self) -> RecordIndex<'_> {
        RecordIndex::new(&self.solutions, &self.companies)
    }

    /// Companies appearing in training examples, in id order.
    pub fn training_companies(&self) -> Result<Vec<&CompanyRecord>> {
        let ids: BTreeSet<&str> = self.train.iter().map(|e| e.company_id.as_str()).collect();
        let records = self.records();
        ids.into_iter().map(|id| records.company(id)).collect()
    }
}

/// A matcher and its parameters.
pub struct Model {
    pub matcher: Matcher,
    pub store: ParamStore,
}

/// Builds the variant selected by the ablation flags, initialised from the
/// global seed, with scale statistics fitted on the training companies.
pub fn build_model(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Model> {
    let variant = Variant::from_ablations(&cfg.ablations)?;
    let mut store = ParamStore::new();
    let matcher = Matcher::new(&mut store, &cfg.model, &data.schema, data.vocab.len(), variant, cfg.seed)?;
    if let Some(scale) = &matcher.scale {
        let inputs = data
            .training_companies()?
            .into_iter()
            .map(|c| ScaleInput::from_company(c, &data.schema))
            .collect::<Result<Vec<_>>>()?;
        scale.set_stats(&mut store, &ScaleStats::fit(&inputs, data.schema.numeric_fields.len()))?;
    }
    Ok(Model { matcher, store })
}

/// Contrastive pretraining of every token-level encoder of the model on the
/// training pairs. The description encoder (and the single encoder of the
/// ungrouped variant) uses `tau_d`, the attribute encoder `tau_a`.
pub fn run_pretrain(cfg: &ExperimentConfig, data: &ExperimentData, model: &mut Model) -> Result<Vec<PretrainReport>> {
    if !cfg.pretraining_enabled() {
        return Ok(Vec::new());
    }
    let index = SimilarityIndex::build(&data.companies, &data.schema)?;
    let records = data.records();
    let pairs: Vec<PairRef<'_>> = data
        .train
        .iter()
        .map(|e| {
            Ok(PairRef {
                solution: records.solution(&e.solution_id)?,
                company: records.company(&e.company_id)?,
                positive: e.is_positive(),
            })
        })
        .collect::<Result<_>>()?;
    let encoders: Vec<(&TokenEncoder, SeqGroup, f64, u64)> = [
        (model.matcher.desc.as_ref(), SeqGroup::Description, cfg.pretrain.tau_d, 1),
        (model.matcher.attr.as_ref(), SeqGroup::Attribute, cfg.pretrain.tau_a, 2),
        (model.matcher.text.as_ref(), SeqGroup::Combined, cfg.pretrain.tau_d, 3),
    ]
    .into_iter()
    .filter_map(|(e, g, t, k)| e.map(|e| (e, g, t, k)))
    .collect();
    let mut reports = Vec::new();
    for (encoder, group, tau, k) in encoders {
        let augmenter = Augmenter::new(
            &data.schema,
            &data.vocab,
            &data.companies,
            &index,
            group,
            cfg.model.max_len,
            cfg.effective_augment(),
        )?;
        let pcfg = PretrainConfig {
            tau,
            epochs: cfg.pretrain.epochs,
            batch: cfg.pretrain.batch,
            lr: cfg.pretrain.lr,
            seed: derive_seed(cfg.seed, PRETRAIN_STREAM, k),
        };
        reports.push(pretrain_encoder(&mut model.store, encoder, &augmenter, &pairs, &pcfg)?);
    }
    Ok(reports)
}

/// Assembled inputs of the three splits.
pub struct PreparedSplits {
    pub train: Vec<Prepared>,
    pub val: Vec<Prepared>,
    pub test: Vec<Prepared>,
}

pub fn prepare_splits(data: &ExperimentData, matcher: &Matcher) -> Result<PreparedSplits> {
    let records = data.records();
    Ok(PreparedSplits {
        train: prepare_examples(matcher, &data.train, &records, &data.vocab)?,
        val: prepare_examples(matcher, &data.val, &records, &data.vocab)?,
        test: prepare_examples(matcher, &data.test, &records, &data.vocab)?,
    })
}

pub fn report_meta(cfg: &ExperimentConfig, run: &str) -> ReportMeta {
    ReportMeta {
        run: run.to_string(),
        fingerprint: cfg.fingerprint(),
        seed: cfg.seed,
        pool: POOL.to_string(),
    }
}

/// Everything produced by one pretrain → train → evaluate run.
pub struct RunOutput {
    pub model: Model,
    pub pretrain: Vec<PretrainReport>,
    pub train: TrainReport,
    pub report: MetricsReport,
    pub baseline_map: f64,
}

pub fn run(cfg: &ExperimentConfig, data: &ExperimentData, run_name: &str) -> Result<RunOutput> {
    let mut model = build_model(cfg, data)?;
    let pretrain = run_pretrain(cfg, data, &mut model)?;
    let splits = prepare_splits(data, &model.matcher)?;
    let train_report = train(&mut model.store, &model.matcher, &splits.train, &splits.val, &cfg.train)?;
    let report = evaluate(&model.matcher, &model.store, &splits.test, report_meta(cfg, run_name))?;
    let baseline_map = random_baseline_map(&splits.test)?;
    Ok(RunOutput {
        model,
        pretrain,
        train: train_report,
        report,
        baseline_map,
    })
}

/// The base run followed by one run per flag added to the base ablations,
/// all with the same seed and data.
pub fn ablate(cfg: &ExperimentConfig, data: &ExperimentData, flags: &[Ablation]) -> Result<Vec<MetricsReport>> {
    let mut reports = vec![run(cfg, data, "base")?.report];
    for &flag in flags {
        let mut variant = cfg.clone();
        variant.ablations.insert(flag);
        variant.validate()?;
        reports.push(run(&variant, data, flag.as_str())?.report);
    }
    Ok(reports)
}

/// Parameters a sweep may vary.
pub const SWEEP_PARAMS: [&str; 5] = ["d_s", "tau_d", "tau_a", "r_t", "r_f"];

/// One run per grid value of `param`; returns `(value, test MAP)`.
pub fn sweep(cfg: &ExperimentConfig, data: &ExperimentData, param: &str, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(Error::Config(format!(
            "cannot sweep `{param}` (expected one of {})",
            SWEEP_PARAMS.join(", ")
        )));
    }
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut out = Vec::with_capacity(grid.len());
    for &v in grid {
        let mut point = cfg.clone();
        let text = if param == "d_s" {
            if v < 1.0 || v.fract() != 0.0 {
                return Err(Error::Config(format!("d_s must be a positive integer, got {v}")));
            }
            format!("{}", v as usize)
        } else {
            v.to_string()
        };
        point.set(param, &text)?;
        point.validate()?;
        let map = run(&point, data, &format!("{param}={text}"))?.report.map();
        out.push((v, map));
    }
    Ok(out)
}

/// Tab-separated `value map` lines under a header naming the parameter.
pub fn curve_text(param: &str, curve: &[(f64, f64)]) -> String {
    let mut out = format!("{param}\tMAP\n");
    for (v, m) in curve {
        out.push_str(&format!("{v}\t{m}\n"));
    }
    out
}
