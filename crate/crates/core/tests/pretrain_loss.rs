use std::collections::BTreeMap;

use fieldmatch::augment::{AugmentConfig, Augmenter, PairRef, SimilarityIndex};
use fieldmatch::data::{build_examples, MatchExample};
use fieldmatch::model::{Matcher, ModelConfig, Variant};
use fieldmatch::pretrain::{build_contrastive_batch, info_nce, info_nce_loss, pretrain_encoder, PretrainConfig};
use fieldmatch::rng::seeded;
use fieldmatch::synth::{generate_corpus, SynthConfig};
use fieldmatch::tensor::{grad_check, ParamGroup, ParamStore, Tensor};
use fieldmatch::text::{build_vocab, check_sequence, SeqGroup};
use proptest::prelude::*;
use rand::Rng as _;

/// Direct evaluation of the definition: for each view, cosine similarities to
/// every other view, the partner in the numerator and partner plus other-pair
/// views in the denominator.
fn oracle(reps: &[Vec<f64>], pair: &[usize], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let n = reps.len();
    let mut total = 0.0;
    for i in 0..n {
        let j = (0..n).find(|&j| j != i && pair[j] == pair[i]).unwrap();
        let phi = |k: usize| (cos(&reps[i], &reps[k]) / tau).exp();
        let denom: f64 = phi(j) + (0..n).filter(|&k| pair[k] != pair[i]).map(phi).sum::<f64>();
        total += -(phi(j) / denom).ln();
    }
    total / n as f64
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn axis_batch() -> (Vec<Vec<f64>>, Vec<usize>) {
    (
        vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]],
        vec![0, 0, 1, 1],
    )
}

#[test]
fn two_orthogonal_pairs_at_unit_temperature() {
    let (reps, pair) = axis_batch();
    let e = 1f64.exp();
    let expected = -(e / (e + 2.0)).ln();
    assert!((expected - 0.5514).abs() < 1e-4);
    let got = info_nce(&tensor(&reps), &pair, 1.0).unwrap();
    assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
}

#[test]
fn two_orthogonal_pairs_at_description_temperature() {
    let (reps, pair) = axis_batch();
    let e5 = 5f64.exp();
    let expected = -(e5 / (e5 + 2.0)).ln();
    assert!((expected - 0.0134).abs() < 1e-4);
    let got = info_nce(&tensor(&reps), &pair, 0.2).unwrap();
    assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
}

#[test]
fn collapsed_representations_give_log_of_view_count_minus_one() {
    for m in 1..=6 {
        for tau in [0.05, 0.2, 1.0, 3.0] {
            let reps = vec![vec![0.3, -1.2, 2.0]; 2 * m];
            let pair: Vec<usize> = (0..2 * m).map(|i| i / 2).collect();
            let got = info_nce(&tensor(&reps), &pair, tau).unwrap();
            let expected = ((2 * m - 1) as f64).ln();
            assert!((got - expected).abs() < 1e-9, "M={m} τ={tau}: {got} vs {expected}");
        }
    }
}

#[test]
fn temperature_must_be_positive() {
    let (reps, pair) = axis_batch();
    assert!(info_nce(&tensor(&reps), &pair, 0.0).is_err());
    assert!(info_nce(&tensor(&reps), &pair, f64::NAN).is_err());
}

#[test]
fn gradient_matches_finite_differences_on_four_views() {
    let mut rng = seeded(11);
    let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut store = ParamStore::new();
    let id = store.add("reps", tensor(&rows), ParamGroup::TokenLevel, true).unwrap();
    for tau in [0.2, 1.0] {
        let report = grad_check(&mut store, 1e-6, |g| {
            let r = g.param(id)?;
            info_nce_loss(g, r, &[0, 0, 1, 1], tau)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_direct_definition_and_symmetries(
        m in 1usize..5,
        tau in 0.05f64..2.0,
        seed in any::<u64>(),
        scale in 0.1f64..10.0,
    ) {
        let mut rng = seeded(seed);
        let reps: Vec<Vec<f64>> = (0..2 * m)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let pair: Vec<usize> = (0..2 * m).map(|i| i / 2).collect();
        let got = info_nce(&tensor(&reps), &pair, tau).unwrap();
        prop_assert!(got >= 0.0);
        prop_assert!((got - oracle(&reps, &pair, tau)).abs() < 1e-9);

        // Rescaling one representation leaves cosines unchanged.
        let mut scaled = reps.clone();
        scaled[0].iter_mut().for_each(|x| *x *= scale);
        prop_assert!((info_nce(&tensor(&scaled), &pair, tau).unwrap() - got).abs() < 1e-6);

        // Permuting pairs together with their representations.
        let perm: Vec<usize> = (0..m).rev().collect();
        let mut permuted = Vec::new();
        for &p in &perm {
            permuted.push(reps[2 * p].clone());
            permuted.push(reps[2 * p + 1].clone());
        }
        prop_assert!((info_nce(&tensor(&permuted), &pair, tau).unwrap() - got).abs() < 1e-9);
    }
}

struct Fixture {
    corpus: fieldmatch::synth::Corpus,
    vocab: fieldmatch::text::Vocab,
    index: SimilarityIndex,
    examples: Vec<MatchExample>,
}

fn fixture(seed: u64) -> Fixture {
    let cfg = SynthConfig {
        n_solutions: 8,
        n_companies: 300,
        positives_per_solution: 6,
        seed,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let vocab = build_vocab(&corpus.solutions, &corpus.companies, 2);
    let index = SimilarityIndex::build(&corpus.companies, &corpus.schema).unwrap();
    let examples = build_examples(&corpus.positives, &corpus.companies, 1, seed).unwrap();
    Fixture {
        corpus,
        vocab,
        index,
        examples,
    }
}

fn pairs<'a>(f: &'a Fixture) -> Vec<PairRef<'a>> {
    let sols: BTreeMap<&str, _> = f.corpus.solutions.iter().map(|s| (s.id.as_str(), s)).collect();
    let comps: BTreeMap<&str, _> = f.corpus.companies.iter().map(|c| (c.id.as_str(), c)).collect();
    f.examples
        .iter()
        .map(|e| PairRef {
            solution: sols[e.solution_id.as_str()],
            company: comps[e.company_id.as_str()],
            positive: e.is_positive(),
        })
        .collect()
}

#[test]
fn batch_construction_orders_views_by_pair() {
    let f = fixture(1);
    let ps = pairs(&f);
    let aug = Augmenter::new(
        &f.corpus.schema,
        &f.vocab,
        &f.corpus.companies,
        &f.index,
        SeqGroup::Description,
        96,
        AugmentConfig::default(),
    )
    .unwrap();
    let batch = build_contrastive_batch(&aug, &ps[..4], &mut seeded(3)).unwrap();
    assert_eq!(batch.views.len(), 8);
    assert_eq!(batch.pair_index, vec![0, 0, 1, 1, 2, 2, 3, 3]);
    for v in &batch.views {
        check_sequence(v).unwrap();
    }
    let again = build_contrastive_batch(&aug, &ps[..4], &mut seeded(3)).unwrap();
    assert_eq!(batch, again);
}

#[test]
fn pretraining_lowers_loss_over_first_epochs() {
    let model = ModelConfig::tiny();
    let mut non_increasing = 0;
    for seed in 0..5u64 {
        let f = fixture(100 + seed);
        let ps = pairs(&f);
        let mut store = ParamStore::new();
        let matcher = Matcher::new(&mut store, &model, &f.corpus.schema, f.vocab.len(), Variant::full(), seed).unwrap();
        let aug = Augmenter::new(
            &f.corpus.schema,
            &f.vocab,
            &f.corpus.companies,
            &f.index,
            SeqGroup::Description,
            model.max_len,
            AugmentConfig::default(),
        )
        .unwrap();
        let before = store.clone();
        let cfg = PretrainConfig {
            tau: 0.2,
            epochs: 3,
            batch: 16,
            lr: 1e-3,
            seed,
        };
        let report = pretrain_encoder(&mut store, matcher.desc.as_ref().unwrap(), &aug, &ps, &cfg).unwrap();
        assert_eq!(report.steps.len(), 3 * ps.len().div_ceil(16));
        let m = &report.epoch_means;
        if m[1] <= m[0] && m[2] <= m[1] {
            non_increasing += 1;
        }
        // Only the description encoder moves.
        for p in store.iter() {
            let old = before.by_name(&p.name).unwrap();
            if p.name.starts_with("desc.") {
                continue;
            }
            assert_eq!(p.value, old.value, "{} changed", p.name);
            assert_eq!(p.trainable, old.trainable);
        }
    }
    assert!(non_increasing >= 4, "non-increasing in {non_increasing} of 5 seeds");
}
