//! Synthetic solution/company corpus with planted match structure.
//!
//! Every entity carries latent industries and a latent scale band. Texts are
//! template sentences over a closed vocabulary of industry keywords and
//! generated filler words; scale features are drawn from band-dependent
//! distributions. Positive pairs are sampled per solution with weights
//! `exp(SHARPNESS * (text_signal * overlap + scale_signal * compat))`.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::data::{CompanyRecord, FieldSchema, SolutionRecord};
use crate::error::{Error, Result};
use crate::rng::{sub_rng, Rng};

/// Exponent scale of the planted pair weights.
pub const PLANTED_SHARPNESS: f64 = 6.0;
pub const SCALE_BANDS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_solutions: usize,
    pub n_companies: usize,
    pub n_industries: usize,
    pub vocab_seed_words: usize,
    pub positives_per_solution: usize,
    pub text_signal_strength: f64,
    pub scale_signal_strength: f64,
    pub missing_field_rate: f64,
    pub missing_token_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_solutions: 20,
            n_companies: 2000,
            n_industries: 8,
            vocab_seed_words: 2000,
            positives_per_solution: 15,
            text_signal_strength: 0.9,
            scale_signal_strength: 0.6,
            missing_field_rate: 0.05,
            missing_token_rate: 0.02,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_solutions", self.n_solutions),
            ("n_companies", self.n_companies),
            ("n_industries", self.n_industries),
            ("vocab_seed_words", self.vocab_seed_words),
            ("positives_per_solution", self.positives_per_solution),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        let rates = [
            ("text_signal_strength", self.text_signal_strength),
            ("scale_signal_strength", self.scale_signal_strength),
            ("missing_field_rate", self.missing_field_rate),
            ("missing_token_rate", self.missing_token_rate),
        ];
        for (name, v) in rates {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.positives_per_solution > self.n_companies {
            return Err(Error::invalid(format!(
                "positives_per_solution {} exceeds n_companies {}",
                self.positives_per_solution, self.n_companies
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionLatent {
    pub industries: Vec<usize>,
    pub band: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompanyLatent {
    pub industry: usize,
    pub band: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub schema: FieldSchema,
    pub solutions: Vec<SolutionRecord>,
    pub companies: Vec<CompanyRecord>,
    pub positives: Vec<(String, String)>,
    pub solution_latents: Vec<SolutionLatent>,
    pub company_latents: Vec<CompanyLatent>,
}

/// Fraction of a company's industries shared with the solution, in [0, 1].
pub fn industry_overlap(s: &SolutionLatent, c: &CompanyLatent) -> f64 {
    if s.industries.contains(&c.industry) {
        1.0
    } else {
        0.0
    }
}

/// A solution's band is the smallest company scale it targets: companies at
/// or above it are fully compatible, each band short costs half.
pub fn band_compatibility(s: &SolutionLatent, c: &CompanyLatent) -> f64 {
    let short = s.band.saturating_sub(c.band) as f64;
    1.0 - short / (SCALE_BANDS - 1) as f64
}

pub fn planted_weight(cfg: &SynthConfig, s: &SolutionLatent, c: &CompanyLatent) -> f64 {
    (PLANTED_SHARPNESS
        * (cfg.text_signal_strength * industry_overlap(s, c)
            + cfg.scale_signal_strength * band_compatibility(s, c)))
        .exp()
}

/// Per-draw probability that solution `s` picks company `c` as a positive.
pub fn planted_probabilities(cfg: &SynthConfig, s: &SolutionLatent, companies: &[CompanyLatent]) -> Vec<f64> {
    let w: Vec<f64> = companies.iter().map(|c| planted_weight(cfg, s, c)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

const INDUSTRIES: [(&str, [&str; 6]); 12] = [
    ("manufacturing", ["factory", "assembly", "machining", "welding", "tooling", "casting"]),
    ("retail", ["store", "shopping", "merchandise", "checkout", "wholesale", "boutique"]),
    ("healthcare", ["clinic", "hospital", "patient", "pharmacy", "diagnosis", "nursing"]),
    ("education", ["school", "tutoring", "campus", "curriculum", "classroom", "exam"]),
    ("finance", ["banking", "loan", "payment", "insurance", "credit", "securities"]),
    ("logistics", ["shipping", "freight", "warehouse", "courier", "fleet", "parcel"]),
    ("agriculture", ["farming", "crops", "harvest", "irrigation", "livestock", "orchard"]),
    ("energy", ["power", "solar", "grid", "battery", "turbine", "fuel"]),
    ("construction", ["building", "contractor", "concrete", "renovation", "scaffold", "masonry"]),
    ("tourism", ["hotel", "travel", "resort", "booking", "catering", "sightseeing"]),
    ("media", ["publishing", "broadcast", "advertising", "film", "studio", "newsroom"]),
    ("gaming", ["arcade", "esports", "console", "puzzle", "multiplayer", "leaderboard"]),
];

const PRODUCTS: [&str; 10] = [
    "analytics", "erp", "crm", "security", "storage", "iot", "portal", "billing", "scheduling",
    "monitoring",
];

const SYLLABLES: [&str; 20] = [
    "ka", "ro", "mi", "ten", "sha", "lu", "vo", "den", "ri", "pa", "zen", "to", "bel", "na", "qui",
    "mar", "so", "li", "fen", "du",
];

struct Lexicon {
    industry_names: Vec<String>,
    keywords: Vec<Vec<String>>,
    filler: Vec<String>,
}

fn pseudo_word(rng: &mut Rng) -> String {
    let n = rng.gen_range(2..=3);
    (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

fn build_lexicon(cfg: &SynthConfig) -> Lexicon {
    let mut rng = sub_rng(cfg.seed, 1, 0);
    let mut industry_names = Vec::new();
    let mut keywords = Vec::new();
    for i in 0..cfg.n_industries {
        if i < INDUSTRIES.len() {
            industry_names.push(INDUSTRIES[i].0.to_string());
            keywords.push(INDUSTRIES[i].1.iter().map(|s| s.to_string()).collect());
        } else {
            industry_names.push(format!("sector{i}"));
            keywords.push((0..6).map(|k| format!("sector{i}kw{k}")).collect());
        }
    }
    let reserved: HashSet<String> = keywords.iter().flatten().chain(&industry_names).cloned().collect();
    let mut filler = Vec::new();
    let mut seen = HashSet::new();
    let mut attempts = 0;
    while filler.len() < cfg.vocab_seed_words {
        let w = if attempts < 50 * cfg.vocab_seed_words {
            pseudo_word(&mut rng)
        } else {
            format!("filler{}", filler.len())
        };
        attempts += 1;
        if !reserved.contains(&w) && seen.insert(w.clone()) {
            filler.push(w);
        }
    }
    Lexicon {
        industry_names,
        keywords,
        filler,
    }
}

fn pick<'a>(rng: &mut Rng, words: &'a [String]) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

/// A random number of filler words, so field lengths (and hence token
/// positions) vary between records.
fn fillers(rng: &mut Rng, lex: &Lexicon, count: std::ops::RangeInclusive<usize>) -> String {
    let n = rng.gen_range(count);
    (0..n).map(|_| pick(rng, &lex.filler)).collect::<Vec<_>>().join(" ")
}

fn prefixed(prefix: String, word: &str) -> String {
    if prefix.is_empty() {
        word.to_string()
    } else {
        format!("{prefix} {word}")
    }
}

fn keywords_of<'a>(rng: &mut Rng, lex: &'a Lexicon, industries: &[usize], n: usize) -> Vec<&'a str> {
    (0..n)
        .map(|_| {
            let ind = *industries.choose(rng).expect("non-empty");
            pick(rng, &lex.keywords[ind])
        })
        .collect()
}

/// A uniformly drawn industry different from `own` (or `own` itself when it
/// is the only one).
fn other_industry(rng: &mut Rng, own: usize, n: usize) -> usize {
    if n < 2 {
        return own;
    }
    let k = rng.gen_range(0..n - 1);
    if k >= own {
        k + 1
    } else {
        k
    }
}

fn solution_record(idx: usize, latent: &SolutionLatent, lex: &Lexicon, rng: &mut Rng) -> SolutionRecord {
    let product = *PRODUCTS.choose(rng).expect("non-empty");
    let kw = keywords_of(rng, lex, &latent.industries, 4);
    let name = format!("{} {product} suite", kw[0]);
    let names: Vec<&str> = latent.industries.iter().map(|&i| lex.industry_names[i].as_str()).collect();
    let intro = format!(
        "a {product} solution that helps {} companies manage {} and {} with {}",
        names.join(" and "),
        kw[1],
        kw[2],
        fillers(rng, lex, 1..=5),
    );
    let n_scenarios = rng.gen_range(1..=4);
    let scenario: Vec<String> = (0..n_scenarios)
        .map(|_| format!("{} {product}", keywords_of(rng, lex, &latent.industries, 1)[0]))
        .collect();
    let schema = FieldSchema::standard();
    let d = &schema.desc_fields_solution;
    let a = &schema.attr_fields_solution;
    SolutionRecord {
        id: format!("S{idx:03}"),
        desc: BTreeMap::from([(d[0].clone(), name), (d[1].clone(), intro)]),
        attr: BTreeMap::from([
            (a[0].clone(), names.iter().map(|s| s.to_string()).collect()),
            (a[1].clone(), scenario),
        ]),
    }
}

fn company_record(
    idx: usize,
    latent: &CompanyLatent,
    lex: &Lexicon,
    rng: &mut Rng,
    suffixes: &mut HashSet<String>,
) -> CompanyRecord {
    let inds = [latent.industry];
    let kw = keywords_of(rng, lex, &inds, 5);
    let mut suffix = pseudo_word(rng);
    while !suffixes.insert(suffix.clone()) {
        suffix = format!("{suffix}{}", pick(rng, &lex.filler).chars().next().unwrap_or('x'));
    }
    let industry = &lex.industry_names[latent.industry];
    let name = format!("{} {suffix}", kw[0]);
    // Variable-length qualifiers keep the industry word away from a fixed
    // position, so position alone does not reveal which field it sits in.
    let intro = format!(
        "{name} is a {} company working on {} and {} for {}",
        prefixed(fillers(rng, lex, 0..=3), industry),
        kw[1],
        kw[2],
        fillers(rng, lex, 1..=5),
    );
    // The business scope names a partner industry: the same words are signal
    // in the introduction and industry fields but noise here.
    let partner_idx = other_industry(rng, latent.industry, lex.industry_names.len());
    let partner = &lex.industry_names[partner_idx];
    let scope = format!(
        "{} {} {} services for {partner} partners",
        kw[3],
        keywords_of(rng, lex, &[partner_idx], 1)[0],
        fillers(rng, lex, 1..=4),
    );
    let schema = FieldSchema::standard();
    let d = &schema.desc_fields_company;
    let a = &schema.attr_fields_company;
    let mut products: Vec<String> = [kw[1], kw[3], kw[4]][..rng.gen_range(1..=3)].iter().map(|k| k.to_string()).collect();
    // A bare unrelated industry name among the products: only the field it
    // sits in tells it apart from the real industry.
    let other = other_industry(rng, latent.industry, lex.industry_names.len());
    let at = rng.gen_range(0..=products.len());
    products.insert(at, lex.industry_names[other].clone());
    let n_copy = rng.gen_range(1..=2);
    // Copyright names mention an unrelated industry: the same words carry
    // signal in the industry field and are noise here, so only field
    // identity separates them.
    let copyrights = (0..n_copy)
        .map(|_| {
            let other = other_industry(rng, latent.industry, lex.industry_names.len());
            format!("{} {} system", lex.industry_names[other], keywords_of(rng, lex, &[other], 1)[0])
        })
        .collect();

    let band = latent.band;
    let scale_cat = if rng.gen_bool(0.8) { band } else { rng.gen_range(0..SCALE_BANDS) };
    let listed = usize::from(rng.gen_bool([0.05, 0.2, 0.6][band]));
    let lognormal = |rng: &mut Rng, mu: f64, sigma: f64| {
        Normal::new(mu, sigma).expect("valid normal").sample(rng).exp()
    };
    let capital = lognormal(rng, [3.5, 5.0, 6.5][band], 0.5);
    let employees = lognormal(rng, [2.5, 4.0, 5.5][band], 0.5).round();
    let apps: f64 = (Normal::new([1.0f64, 4.0, 9.0][band], 1.5)
        .expect("valid normal")
        .sample(rng))
    .max(0.0)
    .round();

    CompanyRecord {
        id: format!("C{idx:05}"),
        desc: BTreeMap::from([(d[0].clone(), name), (d[1].clone(), intro), (d[2].clone(), scope)]),
        attr: BTreeMap::from([
            (a[0].clone(), vec![prefixed(fillers(rng, lex, 0..=5), industry)]),
            (a[1].clone(), products),
            (a[2].clone(), copyrights),
        ]),
        categorical: BTreeMap::from([
            ("enterprise_scale".to_string(), scale_cat),
            ("is_listed".to_string(), listed),
        ]),
        numeric: BTreeMap::from([
            ("registered_capital".to_string(), capital),
            ("employee_count".to_string(), employees),
            ("app_count".to_string(), apps),
        ]),
    }
}

/// Draws `k` distinct indices with probability proportional to `weights`
/// (sequential sampling without replacement via exponential keys).
fn weighted_sample(rng: &mut Rng, weights: &[f64], k: usize) -> Vec<usize> {
    let mut keys: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            (-u.ln() / w, i)
        })
        .collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keys.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Latent draws depend only on the seed and counts, never on signal
/// strengths, so strength sweeps compare identical populations.
pub fn draw_latents(cfg: &SynthConfig) -> (Vec<SolutionLatent>, Vec<CompanyLatent>) {
    let mut rng = sub_rng(cfg.seed, 2, 0);
    let solutions = (0..cfg.n_solutions)
        .map(|_| {
            let n = if cfg.n_industries > 1 && rng.gen_bool(0.5) { 2 } else { 1 };
            let mut inds: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.n_industries, n).into_vec();
            inds.sort_unstable();
            SolutionLatent {
                industries: inds,
                band: rng.gen_range(0..SCALE_BANDS),
            }
        })
        .collect();
    let companies = (0..cfg.n_companies)
        .map(|_| CompanyLatent {
            industry: rng.gen_range(0..cfg.n_industries),
            band: rng.gen_range(0..SCALE_BANDS),
        })
        .collect();
    (solutions, companies)
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let lex = build_lexicon(cfg);
    let (solution_latents, company_latents) = draw_latents(cfg);
    let solutions: Vec<SolutionRecord> = solution_latents
        .iter()
        .enumerate()
        .map(|(i, l)| solution_record(i, l, &lex, &mut sub_rng(cfg.seed, 3, i as u64)))
        .collect();
    let mut suffixes = HashSet::new();
    let companies: Vec<CompanyRecord> = company_latents
        .iter()
        .enumerate()
        .map(|(i, l)| company_record(i, l, &lex, &mut sub_rng(cfg.seed, 4, i as u64), &mut suffixes))
        .collect();

    let mut positives = Vec::new();
    for (si, s) in solution_latents.iter().enumerate() {
        let weights: Vec<f64> = company_latents.iter().map(|c| planted_weight(cfg, s, c)).collect();
        let mut rng = sub_rng(cfg.seed, 5, si as u64);
        let mut picked = weighted_sample(&mut rng, &weights, cfg.positives_per_solution);
        picked.sort_unstable();
        for ci in picked {
            positives.push((solutions[si].id.clone(), companies[ci].id.clone()));
        }
    }

    let (solutions, companies) = if cfg.missing_field_rate > 0.0 || cfg.missing_token_rate > 0.0 {
        let s = inject_missingness_solutions(&solutions, cfg.missing_field_rate, cfg.missing_token_rate, cfg.seed)?;
        let c = inject_missingness_companies(&companies, cfg.missing_field_rate, cfg.missing_token_rate, cfg.seed)?;
        (s, c)
    } else {
        (solutions, companies)
    };

    Ok(Corpus {
        schema: FieldSchema::standard(),
        solutions,
        companies,
        positives,
        solution_latents,
        company_latents,
    })
}

fn check_rates(field_rate: f64, token_rate: f64) -> Result<()> {
    for r in [field_rate, token_rate] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!("missingness rate {r} outside [0, 1]")));
        }
    }
    Ok(())
}

fn drop_tokens(text: &str, rate: f64, rng: &mut Rng) -> String {
    text.split_whitespace()
        .filter(|_| !rng.gen_bool(rate))
        .collect::<Vec<_>>()
        .join(" ")
}

fn thin_texts(
    desc: &mut BTreeMap<String, String>,
    attr: &mut BTreeMap<String, Vec<String>>,
    field_rate: f64,
    token_rate: f64,
    rng: &mut Rng,
) {
    let desc_keys: Vec<String> = desc.keys().cloned().collect();
    for k in desc_keys {
        if rng.gen_bool(field_rate) {
            desc.remove(&k);
            continue;
        }
        let t = drop_tokens(&desc[&k], token_rate, rng);
        if t.is_empty() {
            desc.remove(&k);
        } else {
            desc.insert(k, t);
        }
    }
    let attr_keys: Vec<String> = attr.keys().cloned().collect();
    for k in attr_keys {
        if rng.gen_bool(field_rate) {
            attr.remove(&k);
            continue;
        }
        let tags: Vec<String> = attr[&k]
            .iter()
            .map(|t| drop_tokens(t, token_rate, rng))
            .filter(|t| !t.is_empty())
            .collect();
        if tags.is_empty() {
            attr.remove(&k);
        } else {
            attr.insert(k, tags);
        }
    }
}

/// Drops each text field with probability `field_rate`, then each surviving
/// whitespace token with probability `token_rate`. A field left with no
/// tokens becomes absent. Scale features are never touched.
pub fn inject_missingness_companies(
    records: &[CompanyRecord],
    field_rate: f64,
    token_rate: f64,
    seed: u64,
) -> Result<Vec<CompanyRecord>> {
    check_rates(field_rate, token_rate)?;
    Ok(records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut r = r.clone();
            let mut rng = sub_rng(seed, 6, i as u64);
            thin_texts(&mut r.desc, &mut r.attr, field_rate, token_rate, &mut rng);
            r
        })
        .collect())
}

pub fn inject_missingness_solutions(
    records: &[SolutionRecord],
    field_rate: f64,
    token_rate: f64,
    seed: u64,
) -> Result<Vec<SolutionRecord>> {
    check_rates(field_rate, token_rate)?;
    Ok(records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut r = r.clone();
            let mut rng = sub_rng(seed, 7, i as u64);
            thin_texts(&mut r.desc, &mut r.attr, field_rate, token_rate, &mut rng);
            r
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_record;

    fn clean(cfg: &SynthConfig) -> SynthConfig {
        SynthConfig {
            missing_field_rate: 0.0,
            missing_token_rate: 0.0,
            ..cfg.clone()
        }
    }

    fn small() -> SynthConfig {
        SynthConfig {
            n_solutions: 6,
            n_companies: 300,
            positives_per_solution: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.positives, c.positives);
    }

    #[test]
    fn clean_records_validate() {
        let corpus = generate_corpus(&clean(&small())).unwrap();
        for s in &corpus.solutions {
            assert!(validate_record(s, &corpus.schema).is_clean());
        }
        for c in &corpus.companies {
            let r = validate_record(c, &corpus.schema);
            assert!(r.is_clean(), "{r:?}");
        }
    }

    #[test]
    fn positives_per_solution_respected() {
        let cfg = small();
        let corpus = generate_corpus(&cfg).unwrap();
        assert_eq!(corpus.positives.len(), cfg.n_solutions * cfg.positives_per_solution);
        let unique: HashSet<_> = corpus.positives.iter().collect();
        assert_eq!(unique.len(), corpus.positives.len());
    }

    #[test]
    fn too_many_positives_is_an_error() {
        let cfg = SynthConfig {
            n_companies: 5,
            positives_per_solution: 6,
            ..small()
        };
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn null_signal_weights_are_uniform() {
        let cfg = SynthConfig {
            text_signal_strength: 0.0,
            scale_signal_strength: 0.0,
            ..small()
        };
        let (s, c) = draw_latents(&cfg);
        let p = planted_probabilities(&cfg, &s[0], &c);
        for v in p {
            assert!((v - 1.0 / cfg.n_companies as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_rates_leave_records_unchanged() {
        let corpus = generate_corpus(&clean(&small())).unwrap();
        let same = inject_missingness_companies(&corpus.companies, 0.0, 0.0, 3).unwrap();
        assert_eq!(same, corpus.companies);
    }

    #[test]
    fn field_rate_one_drops_every_text_field() {
        let corpus = generate_corpus(&clean(&small())).unwrap();
        let gone = inject_missingness_companies(&corpus.companies, 1.0, 0.0, 3).unwrap();
        for (before, after) in corpus.companies.iter().zip(&gone) {
            assert!(after.desc.is_empty() && after.attr.is_empty());
            assert_eq!(before.categorical, after.categorical);
            assert_eq!(before.numeric, after.numeric);
        }
    }

    #[test]
    fn invalid_rates_rejected() {
        assert!(inject_missingness_solutions(&[], 1.5, 0.0, 0).is_err());
    }
}
