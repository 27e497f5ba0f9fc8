use std::collections::{BTreeMap, BTreeSet};

use fieldmatch::augment::{
    company_replace, field_mask, maskable_positions, token_mask, AugmentConfig, Augmenter, PairRef,
    SimilarityIndex, Strategy as AugStrategy,
};
use fieldmatch::data::{CompanyRecord, FieldSchema, SolutionRecord};
use fieldmatch::rng::seeded;
use fieldmatch::text::{
    assemble_attribute, assemble_description, check_sequence, pad_or_truncate, SeqGroup, Vocab,
    FIELD_MASK, SEP, TOKEN_MASK,
};
use proptest::prelude::*;

const WORDS: &str = "retail cloud suite skills training store erp shop hospital clinic education";

fn vocab() -> Vocab {
    Vocab::build([WORDS], 1)
}

fn solution(id: &str, name: &str, intro: &str) -> SolutionRecord {
    SolutionRecord {
        id: id.into(),
        desc: BTreeMap::from([
            ("solution_name".into(), name.into()),
            ("solution_introduction".into(), intro.into()),
        ]),
        attr: BTreeMap::from([
            ("solution_industry".into(), vec!["retail".into(), "cloud store".into()]),
            ("solution_scenario".into(), vec!["erp".into()]),
        ]),
    }
}

fn company(id: &str, name: &str, intro: &str) -> CompanyRecord {
    CompanyRecord {
        id: id.into(),
        desc: BTreeMap::from([
            ("company_name".into(), name.into()),
            ("company_introduction".into(), intro.into()),
            ("business_scope".into(), "shop store".into()),
        ]),
        attr: BTreeMap::from([
            ("first_level_industry".into(), vec![intro.split(' ').next().unwrap_or("").into()]),
            ("second_level_industry".into(), vec!["shop".into(), "erp".into()]),
        ]),
        categorical: BTreeMap::from([("enterprise_scale".into(), 0), ("is_listed".into(), 0)]),
        numeric: BTreeMap::new(),
    }
}

fn count(tokens: &[usize], id: usize) -> usize {
    tokens.iter().filter(|&&t| t == id).count()
}

#[test]
fn ten_content_tokens_at_one_fifth_masks_two() {
    let schema = FieldSchema::standard();
    let v = vocab();
    // Ten content tokens: 2 + 2 + 2 + 2 + 2 across five description fields.
    let s = solution("S1", "retail suite", "cloud erp");
    let mut c = company("C1", "shop store", "hospital clinic");
    c.desc.insert("business_scope".into(), "skills training".into());
    let seq = assemble_description(&s, &c, &schema, &v, 64).unwrap();
    assert_eq!(maskable_positions(&seq).len(), 10);
    let masked = token_mask(&seq, 0.2, &mut seeded(3)).unwrap();
    assert_eq!(count(&masked.token_ids, TOKEN_MASK), 2);
    assert_eq!(masked.field_ids, seq.field_ids);
    check_sequence(&masked).unwrap();

    assert_eq!(token_mask(&seq, 0.0, &mut seeded(3)).unwrap(), seq);
    let all = token_mask(&seq, 1.0, &mut seeded(3)).unwrap();
    for i in 0..seq.len() {
        if maskable_positions(&seq).contains(&i) {
            assert_eq!(all.token_ids[i], TOKEN_MASK);
        } else {
            assert_eq!(all.token_ids[i], seq.token_ids[i]);
        }
    }
    check_sequence(&all).unwrap();
}

#[test]
fn half_of_four_fields_collapse() {
    let schema = FieldSchema::standard();
    let v = vocab();
    let s = solution("S1", "retail suite", "cloud erp");
    let c = company("C1", "shop store", "hospital clinic");
    // Attribute sequence: 2 solution + 3 company fields; keep F = 4 by using a
    // schema with two company attribute fields.
    let mut schema4 = schema.clone();
    schema4.attr_fields_company.truncate(2);
    let seq = assemble_attribute(&s, &c, &schema4, &v, 64).unwrap();
    assert_eq!(seq.n_fields(), 4);
    for seed in 0..50 {
        let m = field_mask(&seq, 0.5, &mut seeded(seed)).unwrap();
        check_sequence(&m).unwrap();
        let collapsed = (0..4).filter(|&f| m.token_ids[m.field_span(f)] == [FIELD_MASK]).count();
        assert_eq!(collapsed, 2);
        for f in 0..4 {
            let span = m.field_span(f);
            assert!(span.clone().all(|i| m.field_ids[i] == f + 1));
            assert_eq!(m.token_ids[m.sep_positions[f]], SEP);
        }
    }
    assert_eq!(field_mask(&seq, 0.0, &mut seeded(1)).unwrap(), seq);
    let _ = schema;
}

#[test]
fn masking_commutes_with_padding() {
    let schema = FieldSchema::standard();
    let v = vocab();
    let seq = assemble_attribute(
        &solution("S1", "retail suite", "cloud erp"),
        &company("C1", "shop store", "hospital clinic"),
        &schema,
        &v,
        64,
    )
    .unwrap();
    let padded = pad_or_truncate(&seq, 48).unwrap();
    for seed in 0..20 {
        let a = pad_or_truncate(&token_mask(&seq, 0.3, &mut seeded(seed)).unwrap(), 48).unwrap();
        let b = token_mask(&padded, 0.3, &mut seeded(seed)).unwrap();
        assert_eq!(a, b);
        let a = pad_or_truncate(&field_mask(&seq, 0.5, &mut seeded(seed)).unwrap(), 48).unwrap();
        let b = field_mask(&padded, 0.5, &mut seeded(seed)).unwrap();
        assert_eq!(a, b);
        check_sequence(&b).unwrap();
    }
}

fn fixture_index() -> SimilarityIndex {
    SimilarityIndex::from_names(&[
        ("c1", "cloudbase"),
        ("c2", "cloudnet"),
        ("c3", "cloudbank"),
        ("c4", "retailhub"),
        ("c5", "retailnet"),
        ("c6", "zzz"),
    ])
    .unwrap()
}

fn ids(list: &[(String, f64)]) -> Vec<&str> {
    list.iter().map(|(id, _)| id.as_str()).collect()
}

#[test]
fn six_company_fixture_ranks_by_hand_computed_cosines() {
    // cloudbase = {clo lou oud udb dba bas ase}, cloudbank shares the first
    // five of seven trigrams: 5/7. cloudnet = {clo lou oud udn dne net}
    // shares three with both: 3/√42. retailnet shares only "net" with
    // cloudnet: 1/√42; retailhub/retailnet share four of seven: 4/7.
    let index = fixture_index();
    let r42 = 42f64.sqrt();

    let c1 = index.neighbors("c1").unwrap();
    assert_eq!(ids(c1), ["c3", "c2", "c4", "c5", "c6"]);
    assert!((c1[0].1 - 5.0 / 7.0).abs() < 1e-12);
    assert!((c1[1].1 - 3.0 / r42).abs() < 1e-12);
    assert_eq!(c1[2].1, 0.0);

    let c2 = index.neighbors("c2").unwrap();
    assert_eq!(ids(c2), ["c1", "c3", "c5", "c4", "c6"]);
    assert!((c2[2].1 - 1.0 / r42).abs() < 1e-12);

    let c4 = index.neighbors("c4").unwrap();
    assert_eq!(ids(c4)[0], "c5");
    assert!((c4[0].1 - 4.0 / 7.0).abs() < 1e-12);

    assert_eq!(ids(index.neighbors("c6").unwrap()), ["c1", "c2", "c3", "c4", "c5"]);

    for (id, list) in index.iter() {
        assert!(list.len() <= 5);
        assert!(list.iter().all(|(n, s)| n != id && (-1.0..=1.0).contains(s)));
        assert!(list.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}

#[test]
fn identical_names_have_unit_similarity() {
    let index = SimilarityIndex::from_names(&[("a", "Nova Retail"), ("b", "nova retail"), ("c", "xyz")]).unwrap();
    let a = index.neighbors("a").unwrap();
    assert_eq!(a[0].0, "b");
    assert!((a[0].1 - 1.0).abs() < 1e-12);
    assert_eq!(a[1].1, 0.0);
}

#[test]
fn index_file_round_trip() {
    let index = fixture_index();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("index.jsonl");
    index.store(&p).unwrap();
    assert_eq!(SimilarityIndex::load(&p).unwrap(), index);
    std::fs::write(&p, "{\"company_id\":\"a\",\"neighbors\":[\"a\"],\"scores\":[1.0]}\n").unwrap();
    assert!(SimilarityIndex::load(&p).is_err());
}

#[test]
fn replacement_is_uniform_over_top_five() {
    let index = fixture_index();
    let mut rng = seeded(2024);
    let n = 10_000;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for _ in 0..n {
        let c = company_replace("c1", &index, &mut rng).unwrap();
        assert_ne!(c, "c1");
        *counts.entry(c.to_string()).or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 5);
    let sigma = (n as f64 * 0.2 * 0.8).sqrt();
    for (id, k) in counts {
        assert!((k as f64 - 0.2 * n as f64).abs() <= 3.0 * sigma, "{id}: {k}");
    }
}

fn augmenter_fixture() -> (FieldSchema, Vocab, Vec<SolutionRecord>, Vec<CompanyRecord>) {
    let schema = FieldSchema::standard();
    let v = vocab();
    let sols = vec![solution("S1", "retail suite", "cloud erp store shop")];
    let comps = vec![
        company("C1", "retail store", "hospital clinic skills"),
        company("C2", "retail shop", "education training"),
        company("C3", "cloud erp", "clinic"),
    ];
    (schema, v, sols, comps)
}

#[test]
fn negative_pairs_never_replace_the_company() {
    let (schema, v, sols, comps) = augmenter_fixture();
    let index = SimilarityIndex::build(&comps, &schema).unwrap();
    let aug = Augmenter::new(&schema, &v, &comps, &index, SeqGroup::Description, 64, AugmentConfig::default()).unwrap();
    let mut rng = seeded(9);
    let mut seen = BTreeSet::new();
    for _ in 0..200 {
        let pair = PairRef {
            solution: &sols[0],
            company: &comps[0],
            positive: false,
        };
        let out = aug.augment_pair(pair, &mut rng).unwrap();
        let [a, b] = out.strategies;
        assert_ne!(a, b);
        assert!(out.strategies.iter().all(|s| *s != Some(AugStrategy::CompanyReplace)));
        for view in &out.views {
            check_sequence(view).unwrap();
        }
        seen.insert((a, b));
    }
    assert_eq!(seen.len(), 2);
}

#[test]
fn positive_pairs_use_all_three_strategies_in_distinct_pairs() {
    let (schema, v, sols, comps) = augmenter_fixture();
    let index = SimilarityIndex::build(&comps, &schema).unwrap();
    let aug = Augmenter::new(&schema, &v, &comps, &index, SeqGroup::Attribute, 64, AugmentConfig::default()).unwrap();
    let pair = PairRef {
        solution: &sols[0],
        company: &comps[0],
        positive: true,
    };
    let original = aug.assemble(pair.solution, pair.company).unwrap();
    let mut seen = BTreeSet::new();
    let mut rng = seeded(5);
    for _ in 0..300 {
        let out = aug.augment_pair(pair, &mut rng).unwrap();
        let [a, b] = out.strategies;
        assert_ne!(a, b);
        seen.insert((a.unwrap(), b.unwrap()));
        for (view, s) in out.views.iter().zip(out.strategies) {
            check_sequence(view).unwrap();
            assert_ne!(view, &original, "{s:?} left the view unchanged");
        }
    }
    assert_eq!(seen.len(), 6);

    let a = aug.augment_pair(pair, &mut seeded(77)).unwrap();
    let b = aug.augment_pair(pair, &mut seeded(77)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn disabled_strategies_are_never_drawn() {
    let (schema, v, sols, comps) = augmenter_fixture();
    let index = SimilarityIndex::build(&comps, &schema).unwrap();
    let cfg = AugmentConfig {
        field_masking: false,
        company_replacing: false,
        ..AugmentConfig::default()
    };
    let aug = Augmenter::new(&schema, &v, &comps, &index, SeqGroup::Description, 64, cfg).unwrap();
    let pair = PairRef {
        solution: &sols[0],
        company: &comps[1],
        positive: true,
    };
    let out = aug.augment_pair(pair, &mut seeded(1)).unwrap();
    assert_eq!(out.strategies, [Some(AugStrategy::TokenMask); 2]);
}

fn arb_text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS.split(' ').collect::<Vec<_>>()), 0..6)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mask_counts_are_exact(
        name in arb_text(),
        intro in arb_text(),
        cname in arb_text(),
        r_t in 0.0f64..=1.0,
        r_f in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let schema = FieldSchema::standard();
        let v = vocab();
        let mut s = solution("S1", &name, &intro);
        if name.is_empty() {
            s.desc.remove("solution_name");
        }
        let c = company("C1", &cname, "clinic");
        let seq = assemble_description(&s, &c, &schema, &v, 64).unwrap();
        let w = maskable_positions(&seq).len();
        let tm = token_mask(&seq, r_t, &mut seeded(seed)).unwrap();
        check_sequence(&tm).unwrap();
        let expected = ((r_t * w as f64) + 1e-9).floor() as usize;
        prop_assert_eq!(count(&tm.token_ids, TOKEN_MASK), expected);

        let fm = field_mask(&seq, r_f, &mut seeded(seed)).unwrap();
        check_sequence(&fm).unwrap();
        let f = seq.n_fields();
        let was_empty = (0..f).filter(|&i| seq.token_ids[seq.field_span(i)] == [FIELD_MASK]).count();
        let now_empty = (0..f).filter(|&i| fm.token_ids[fm.field_span(i)] == [FIELD_MASK]).count();
        let collapsed = ((r_f * f as f64) + 1e-9).floor() as usize;
        prop_assert!(now_empty >= collapsed.max(was_empty));
        prop_assert!(now_empty <= collapsed + was_empty);
    }
}
