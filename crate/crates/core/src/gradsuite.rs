//! The finite-difference gradient suite: every differentiable primitive, the
//! scale encoder, the joint matching loss and the contrastive loss, each on a
//! tiny double-precision fixture.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::data::{CompanyRecord, FieldSchema, SolutionRecord};
use crate::error::Result;
use crate::model::{Matcher, ModelConfig, ScaleEncoder, ScaleInput, ScaleStats, Variant};
use crate::pretrain::info_nce_loss;
use crate::rng::{seeded, Rng};
use crate::tensor::{grad_check, GradCheckReport, Graph, NodeId, ParamGroup, ParamStore, Tensor};
use crate::text::Vocab;

/// Central-difference step.
pub const SUITE_EPS: f64 = 1e-5;
/// Maximum relative error accepted for every component.
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_relative_error < SUITE_TOLERANCE
    }
}

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Result<Tensor> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn store_of(entries: Vec<(&str, Tensor)>) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.add(n, t, ParamGroup::TokenLevel, true)?;
    }
    Ok(s)
}

/// Reduces a node to a scalar through fixed random weights followed by a
/// square, so every output element receives a distinct upstream gradient.
fn reduce(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let (rows, cols) = {
        let v = g.value(x);
        (v.rows(), v.cols())
    };
    let mut rng = seeded(seed);
    let w = g.input(random(&mut rng, cols, 1)?)?;
    let u = g.input(random(&mut rng, 1, rows)?)?;
    let y = g.matmul(x, w)?;
    let z = g.matmul(u, y)?;
    let off = g.input(Tensor::matrix(1, 1, vec![0.3])?)?;
    let z = g.add(z, off)?;
    let sq = g.matmul_t(z, z)?;
    g.sum(sq)
}

fn params<const N: usize>(g: &mut Graph, names: [&str; N]) -> Result<[NodeId; N]> {
    let ids = names.iter().map(|n| g.param_by_name(n)).collect::<Result<Vec<_>>>()?;
    Ok(ids.try_into().expect("one id per name"))
}

type LossFn = Box<dyn Fn(&mut Graph) -> Result<NodeId>>;

fn primitive_cases() -> Result<Vec<(&'static str, ParamStore, LossFn)>> {
    let mut rng = seeded(1);
    let base = store_of(vec![
        ("x", random(&mut rng, 3, 4)?),
        ("w", random(&mut rng, 4, 5)?),
        ("bias", random(&mut rng, 1, 5)?),
        ("y", random(&mut rng, 3, 4)?),
        ("r", random(&mut rng, 1, 4)?),
        ("k", random(&mut rng, 5, 4)?),
        ("v", random(&mut rng, 5, 4)?),
        ("gamma", random(&mut rng, 1, 4)?),
        ("beta", random(&mut rng, 1, 4)?),
    ])?;
    let only = |names: &[&str]| -> ParamStore {
        let mut s = base.clone();
        for p in base.iter() {
            if !names.contains(&p.name.as_str()) {
                s.set_trainable(&p.name, false);
            }
        }
        s
    };
    let cases: Vec<(&'static str, ParamStore, LossFn)> = vec![
        ("affine", only(&["x", "w", "bias"]), Box::new(move |g| {
            let [p0, p1, p2] = params(g, ["x", "w", "bias"])?;
            let o = g.affine(p0, p1, p2)?;
            reduce(g, o, 2)
        })),
        ("matmul", only(&["x", "w"]), Box::new(move |g| {
            let [p0, p1] = params(g, ["x", "w"])?;
            let o = g.matmul(p0, p1)?;
            reduce(g, o, 3)
        })),
        ("matmul_t", only(&["x", "y"]), Box::new(move |g| {
            let [p0, p1] = params(g, ["x", "y"])?;
            let o = g.matmul_t(p0, p1)?;
            reduce(g, o, 4)
        })),
        ("add/add_row", only(&["x", "y", "r"]), Box::new(move |g| {
            let [p0, p1] = params(g, ["x", "y"])?;
            let o = g.add(p0, p1)?;
            let [p0] = params(g, ["r"])?;
            let o = g.add_row(o, p0)?;
            reduce(g, o, 5)
        })),
        ("embedding_gather", only(&["y"]), Box::new(move |g| {
            let [p0] = params(g, ["y"])?;
            let o = g.embedding_gather(p0, &[2, 0, 2, 1])?;
            reduce(g, o, 6)
        })),
        ("concat", only(&["x", "y"]), Box::new(move |g| {
            let [x, y] = params(g, ["x", "y"])?;
            let rows = g.concat(&[x, y], 0)?;
            let cols = g.concat(&[x, y], 1)?;
            let a = reduce(g, rows, 7)?;
            let b = reduce(g, cols, 8)?;
            let both = g.concat(&[a, b], 1)?;
            g.sum(both)
        })),
        ("select_rows/pick", only(&["x"]), Box::new(move |g| {
            let [p0] = params(g, ["x"])?;
            let r = g.select_rows(p0, &[2, 2, 0])?;
            let q = g.pick(r, &[0, 5, 11])?;
            let w = reduce(g, r, 9)?;
            let qq = g.matmul_t(q, q)?;
            let both = g.concat(&[w, qq], 1)?;
            g.sum(both)
        })),
        ("softmax", only(&["x"]), Box::new(move |g| {
            let [p0] = params(g, ["x"])?;
            let x = p0;
            let a = g.softmax(x, 0)?;
            let b = g.softmax(x, 1)?;
            let a = reduce(g, a, 10)?;
            let b = reduce(g, b, 11)?;
            g.add(a, b)
        })),
        ("leaky_relu", only(&["x"]), Box::new(move |g| {
            let [p0] = params(g, ["x"])?;
            let o = g.leaky_relu(p0, 0.01)?;
            reduce(g, o, 12)
        })),
        ("relu", only(&["x"]), Box::new(move |g| {
            let [p0] = params(g, ["x"])?;
            let o = g.relu(p0)?;
            reduce(g, o, 13)
        })),
        ("logistic", only(&["x"]), Box::new(move |g| {
            let [p0] = params(g, ["x"])?;
            let o = g.logistic(p0)?;
            reduce(g, o, 14)
        })),
        ("scale/mean", only(&["x"]), Box::new(move |g| {
            let [p0] = params(g, ["x"])?;
            let o = g.scale(p0, -2.5)?;
            let m = g.mean(o)?;
            let w = reduce(g, o, 15)?;
            let both = g.concat(&[m, w], 1)?;
            reduce(g, both, 16)
        })),
        ("layer_norm", only(&["x", "gamma", "beta"]), Box::new(move |g| {
            let [p0, p1, p2] = params(g, ["x", "gamma", "beta"])?;
            let o = g.layer_norm(p0, p1, p2)?;
            reduce(g, o, 17)
        })),
        ("multi_head_attention", only(&["x", "k", "v"]), Box::new(move |g| {
            let mask = [true, true, false, true, true];
            let [p0, p1, p2] = params(g, ["x", "k", "v"])?;
            let o = g.multi_head_attention(p0, p1, p2, 2, Some(&mask))?;
            reduce(g, o, 18)
        })),
        ("cosine_similarity", only(&["x", "r"]), Box::new(move |g| {
            let [p0, p1] = params(g, ["x", "r"])?;
            let o = g.cosine_similarity(p0, p1)?;
            reduce(g, o, 19)
        })),
        ("binary_cross_entropy", only(&["x"]), Box::new(move |g| {
            let [p0] = params(g, ["x"])?;
            let probs = g.logistic(p0)?;
            let labels: Vec<f64> = (0..12).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
            let l = g.binary_cross_entropy(probs, &labels)?;
            reduce(g, l, 20)
        })),
        ("log_softmax_masked", only(&["x"]), Box::new(move |g| {
            let mask: Vec<bool> = (0..12).map(|i| i % 4 != i / 4).collect();
            let [p0] = params(g, ["x"])?;
            let o = g.log_softmax_masked(p0, &mask)?;
            reduce(g, o, 21)
        })),
    ];
    Ok(cases)
}

/// Tiny model configuration used by the suite.
pub fn suite_model_config() -> ModelConfig {
    ModelConfig {
        d_e: 8,
        token_layers: 1,
        heads: 2,
        ff: 8,
        max_len: 48,
        field_layers: 1,
        d_s: 4,
        buckets: 3,
        alpha: 1.0,
        init_std: 0.3,
    }
}

/// One solution, one matching and one non-matching company.
pub fn suite_records() -> (SolutionRecord, CompanyRecord, CompanyRecord) {
    let s = SolutionRecord {
        id: "S1".into(),
        desc: BTreeMap::from([
            ("solution_name".into(), "retail erp".into()),
            ("solution_introduction".into(), "cloud suite for retail store".into()),
        ]),
        attr: BTreeMap::from([
            ("solution_industry".into(), vec!["retail".into()]),
            ("solution_scenario".into(), vec!["store erp".into(), "shop".into()]),
        ]),
    };
    let c = |id: &str, kw: &str, band: usize, cap: f64| CompanyRecord {
        id: id.into(),
        desc: BTreeMap::from([
            ("company_name".into(), format!("{kw} zen")),
            ("company_introduction".into(), format!("a {kw} company")),
        ]),
        attr: BTreeMap::from([
            ("first_level_industry".into(), vec![kw.to_string()]),
            ("copyrights".into(), vec![format!("{kw} system"), "cloud".into()]),
        ]),
        categorical: BTreeMap::from([("enterprise_scale".into(), band), ("is_listed".into(), band % 2)]),
        numeric: BTreeMap::from([
            ("registered_capital".into(), cap),
            ("employee_count".into(), cap * 3.0),
            ("app_count".into(), 2.0 + cap),
        ]),
    };
    (s, c("C1", "retail", 2, 1.5), c("C2", "clinic", 0, -0.5))
}

fn suite_vocab() -> Vocab {
    Vocab::build(["retail erp cloud suite for store shop zen a company system clinic"], 1)
}

fn check(name: &str, store: &mut ParamStore, f: impl Fn(&mut Graph) -> Result<NodeId>) -> Result<SuiteEntry> {
    let report = grad_check(store, SUITE_EPS, f)?;
    log::info!("{name}: max relative error {:.3e} over {} scalars", report.max_relative_error, report.checked);
    Ok(SuiteEntry {
        name: name.to_string(),
        report,
    })
}

/// Runs every check; the caller decides pass/fail via [`SuiteEntry::passed`].
pub fn run_suite() -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (name, mut store, f) in primitive_cases()? {
        out.push(check(name, &mut store, f)?);
    }

    // Scale encoder through its score head and cross-entropy.
    let schema = FieldSchema::standard();
    let cfg = suite_model_config();
    let mut store = ParamStore::new();
    let enc = ScaleEncoder::new(&mut store, &schema, &cfg, &mut seeded(5))?;
    enc.set_stats(
        &mut store,
        &ScaleStats {
            mean: vec![1.0, 2.0, 0.5],
            std: vec![2.0, 1.5, 1.0],
        },
    )?;
    let xs = [
        (ScaleInput { categorical: vec![2, 1], numeric: vec![3.0, 0.2, 1.0] }, 1.0),
        (ScaleInput { categorical: vec![0, 0], numeric: vec![-1.0, 4.0, 0.1] }, 0.0),
    ];
    out.push(check("scale_encoder", &mut store, |g| {
        let mut ls = Vec::new();
        for (x, y) in &xs {
            let cs = enc.encode(g, x)?;
            let p = enc.score(g, cs)?;
            ls.push(g.binary_cross_entropy(p, &[*y])?);
        }
        let all = g.concat(&ls, 1)?;
        g.mean(all)
    })?);

    // Joint loss of the full hierarchical matcher and the single-encoder variant.
    let (s, c1, c2) = suite_records();
    let vocab = suite_vocab();
    for (name, variant) in [
        ("joint_loss(full)", Variant::full()),
        ("joint_loss(combined_text)", Variant { combined_text: true, ..Variant::full() }),
    ] {
        let mut store = ParamStore::new();
        let m = Matcher::new(&mut store, &cfg, &schema, vocab.len(), variant, 11)?;
        let x1 = m.prepare(&s, &c1, &vocab)?;
        let x2 = m.prepare(&s, &c2, &vocab)?;
        out.push(check(name, &mut store, |g| m.batch_loss(g, &[(&x1, 1), (&x2, 0)]))?);
    }

    // Contrastive loss over two pairs of views at both temperatures.
    let mut rng = seeded(11);
    let mut store = ParamStore::new();
    let id = store.add("reps", random(&mut rng, 4, 5)?, ParamGroup::TokenLevel, true)?;
    for tau in [0.2, 0.05] {
        out.push(check(&format!("info_nce(tau={tau})"), &mut store, |g| {
            let r = g.param(id)?;
            info_nce_loss(g, r, &[0, 0, 1, 1], tau)
        })?);
    }
    Ok(out)
}
