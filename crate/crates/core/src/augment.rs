//! View generation for contrastive pretraining: token masking, field masking
//! and company replacing, plus the company name-similarity index.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{CompanyRecord, FieldSchema, SolutionRecord};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::text::{
    assemble_sequence, pad_or_truncate, SeqGroup, TokenSequence, Vocab, FIELD_MASK, TOKEN_MASK,
};

/// Neighbours kept per company.
pub const TOP_K: usize = 5;

/// Slack added before flooring `ratio * count` so that products such as
/// `0.29 * 100` do not lose one to binary rounding.
const FLOOR_EPS: f64 = 1e-9;

/// `⌊ratio · count⌋`.
pub fn mask_count(ratio: f64, count: usize) -> usize {
    ((ratio * count as f64 + FLOOR_EPS).floor() as usize).min(count)
}

fn check_ratio(name: &str, r: f64) -> Result<()> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} = {r} outside [0, 1]")))
    }
}

/// Positions eligible for token masking: content tokens, excluding the
/// `[field_mask]` placeholder of an empty field.
pub fn maskable_positions(seq: &TokenSequence) -> Vec<usize> {
    seq.content_positions()
        .into_iter()
        .filter(|&i| seq.token_ids[i] != FIELD_MASK)
        .collect()
}

/// Replaces `⌊r_t · W⌋` content tokens, chosen uniformly without replacement,
/// by `[token_mask]`. Structure and field ids are untouched.
pub fn token_mask(seq: &TokenSequence, r_t: f64, rng: &mut Rng) -> Result<TokenSequence> {
    check_ratio("r_t", r_t)?;
    let eligible = maskable_positions(seq);
    let m = mask_count(r_t, eligible.len());
    let mut out = seq.clone();
    if m == 0 {
        return Ok(out);
    }
    for i in sample(rng, eligible.len(), m).into_iter() {
        out.token_ids[eligible[i]] = TOKEN_MASK;
    }
    Ok(out)
}

/// Collapses `⌊r_f · F⌋` fields, chosen uniformly without replacement, to the
/// single token `[field_mask]`. Padding length is preserved.
pub fn field_mask(seq: &TokenSequence, r_f: f64, rng: &mut Rng) -> Result<TokenSequence> {
    check_ratio("r_f", r_f)?;
    let n = seq.n_fields();
    let m = mask_count(r_f, n);
    if m == 0 {
        return Ok(seq.clone());
    }
    let mut contents = seq.contents();
    let n_sol = contents.solution.len();
    for f in sample(rng, n, m).into_iter() {
        if f < n_sol {
            contents.solution[f].clear();
        } else {
            contents.company[f - n_sol].clear();
        }
    }
    let out = contents.to_sequence();
    if seq.len() > seq.real_len() {
        pad_or_truncate(&out, seq.len())
    } else {
        Ok(out)
    }
}

/// Lowercased character trigram counts of a name. Names shorter than three
/// characters contribute themselves as a single gram.
pub fn trigrams(name: &str) -> BTreeMap<String, f64> {
    let chars: Vec<char> = name.to_lowercase().chars().collect();
    let mut counts = BTreeMap::new();
    if chars.is_empty() {
        return counts;
    }
    if chars.len() < 3 {
        counts.insert(chars.iter().collect(), 1.0);
        return counts;
    }
    for w in chars.windows(3) {
        *counts.entry(w.iter().collect()).or_insert(0.0) += 1.0;
    }
    counts
}

/// Cosine similarity of the trigram count vectors of two names; 0 when
/// either name has no trigrams.
pub fn name_similarity(a: &str, b: &str) -> f64 {
    let (ta, tb) = (trigrams(a), trigrams(b));
    let norm = |t: &BTreeMap<String, f64>| t.values().map(|v| v * v).sum::<f64>().sqrt();
    let (na, nb) = (norm(&ta), norm(&tb));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = ta.iter().filter_map(|(g, v)| tb.get(g).map(|w| v * w)).sum();
    dot / (na * nb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexLine {
    company_id: String,
    neighbors: Vec<String>,
    scores: Vec<f64>,
}

/// Company id → up to five most name-similar other companies, by similarity
/// descending then id ascending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimilarityIndex {
    neighbors: BTreeMap<String, Vec<(String, f64)>>,
}

impl SimilarityIndex {
    /// Builds the index from the first company description field (the name).
    pub fn build(companies: &[CompanyRecord], schema: &FieldSchema) -> Result<SimilarityIndex> {
        let name_field = schema
            .desc_fields_company
            .first()
            .ok_or_else(|| Error::invalid("schema has no company description field"))?;
        let names: Vec<(&str, &str)> = companies
            .iter()
            .map(|c| (c.id.as_str(), c.desc.get(name_field).map_or("", String::as_str)))
            .collect();
        Self::from_names(&names)
    }

    /// Builds the index from `(company id, name)` pairs.
    pub fn from_names(names: &[(&str, &str)]) -> Result<SimilarityIndex> {
        if names.len() < 2 {
            return Err(Error::invalid("similarity index needs at least 2 companies"));
        }
        let mut order: Vec<usize> = (0..names.len()).collect();
        order.sort_by(|&a, &b| names[a].0.cmp(names[b].0));
        if order.windows(2).any(|w| names[w[0]].0 == names[w[1]].0) {
            return Err(Error::invalid("duplicate company id in similarity index"));
        }

        // L2-normalised sparse vectors and an inverted index gram → (company, weight).
        let mut postings: HashMap<String, Vec<(usize, f64)>> = HashMap::new();
        let mut vectors: Vec<Vec<(String, f64)>> = Vec::with_capacity(names.len());
        for (i, &(_, name)) in names.iter().enumerate() {
            let t = trigrams(name);
            let norm = t.values().map(|v| v * v).sum::<f64>().sqrt();
            let v: Vec<(String, f64)> = t.into_iter().map(|(g, c)| (g, c / norm)).collect();
            for (g, w) in &v {
                postings.entry(g.clone()).or_default().push((i, *w));
            }
            vectors.push(v);
        }

        let mut neighbors = BTreeMap::new();
        let mut scores = vec![0.0; names.len()];
        for (q, v) in vectors.iter().enumerate() {
            scores.iter_mut().for_each(|s| *s = 0.0);
            for (g, w) in v {
                for &(j, wj) in &postings[g] {
                    scores[j] += w * wj;
                }
            }
            let mut top: Vec<usize> = Vec::with_capacity(TOP_K + 1);
            // `order` is id-ascending, so a strict comparison keeps the
            // lower id first among equal similarities.
            for &j in &order {
                if j == q {
                    continue;
                }
                let pos = top.iter().position(|&k| scores[j] > scores[k]).unwrap_or(top.len());
                if pos < TOP_K {
                    top.insert(pos, j);
                    top.truncate(TOP_K);
                }
            }
            let list = top
                .into_iter()
                .map(|j| (names[j].0.to_string(), scores[j].clamp(-1.0, 1.0)))
                .collect();
            neighbors.insert(names[q].0.to_string(), list);
        }
        Ok(SimilarityIndex { neighbors })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, company_id: &str) -> Option<&[(String, f64)]> {
        self.neighbors.get(company_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(String, f64)])> {
        self.neighbors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// One JSON object per line: company id, neighbour ids, scores.
    pub fn store(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (id, list) in &self.neighbors {
            let line = IndexLine {
                company_id: id.clone(),
                neighbors: list.iter().map(|(n, _)| n.clone()).collect(),
                scores: list.iter().map(|(_, s)| *s).collect(),
            };
            serde_json::to_writer(&mut out, &line).expect("index line serializes");
            out.write_all(b"\n").expect("write to vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SimilarityIndex> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut neighbors = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: IndexLine = serde_json::from_str(raw).map_err(|e| parse_err(i + 1, e.to_string()))?;
            if line.neighbors.len() != line.scores.len() || line.neighbors.len() > TOP_K {
                return Err(parse_err(i + 1, "neighbour and score lists must match and hold at most 5".into()));
            }
            if line.neighbors.contains(&line.company_id) {
                return Err(parse_err(i + 1, "a company cannot be its own neighbour".into()));
            }
            if line.scores.windows(2).any(|w| w[0] < w[1]) || line.scores.iter().any(|s| !(-1.0..=1.0).contains(s)) {
                return Err(parse_err(i + 1, "scores must lie in [-1, 1] and be sorted descending".into()));
            }
            let list = line.neighbors.into_iter().zip(line.scores).collect();
            if neighbors.insert(line.company_id, list).is_some() {
                return Err(parse_err(i + 1, "duplicate company id".into()));
            }
        }
        Ok(SimilarityIndex { neighbors })
    }
}

/// Draws a replacement company uniformly from the neighbours of `company_id`.
pub fn company_replace<'a>(company_id: &str, index: &'a SimilarityIndex, rng: &mut Rng) -> Result<&'a str> {
    let list = index
        .neighbors(company_id)
        .ok_or_else(|| Error::invalid(format!("company `{company_id}` is not in the similarity index")))?;
    if list.is_empty() {
        return Err(Error::invalid(format!("company `{company_id}` has no neighbours")));
    }
    Ok(&list[rng.gen_range(0..list.len())].0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    TokenMask,
    FieldMask,
    CompanyReplace,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::TokenMask => "token_mask",
            Strategy::FieldMask => "field_mask",
            Strategy::CompanyReplace => "company_replace",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub r_t: f64,
    pub r_f: f64,
    pub token_masking: bool,
    pub field_masking: bool,
    pub company_replacing: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            r_t: 0.2,
            r_f: 0.5,
            token_masking: true,
            field_masking: true,
            company_replacing: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratio("r_t", self.r_t)?;
        check_ratio("r_f", self.r_f)
    }

    /// Enabled strategies applicable to a pair, in a fixed order.
    pub fn available(&self, positive: bool) -> Vec<Strategy> {
        let mut out = Vec::with_capacity(3);
        if self.token_masking {
            out.push(Strategy::TokenMask);
        }
        if self.field_masking {
            out.push(Strategy::FieldMask);
        }
        if self.company_replacing && positive {
            out.push(Strategy::CompanyReplace);
        }
        out
    }
}

/// A solution–company pair to augment.
#[derive(Debug, Clone, Copy)]
pub struct PairRef<'a> {
    pub solution: &'a SolutionRecord,
    pub company: &'a CompanyRecord,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub views: [TokenSequence; 2],
    /// Strategy behind each view; `None` when no strategy was available and
    /// the view is the original sequence.
    pub strategies: [Option<Strategy>; 2],
}

/// Everything needed to turn a record pair into augmented views of one
/// sequence group.
pub struct Augmenter<'a> {
    pub schema: &'a FieldSchema,
    pub vocab: &'a Vocab,
    pub index: &'a SimilarityIndex,
    pub group: SeqGroup,
    pub max_len: usize,
    pub config: AugmentConfig,
    companies: HashMap<&'a str, &'a CompanyRecord>,
}

impl<'a> Augmenter<'a> {
    pub fn new(
        schema: &'a FieldSchema,
        vocab: &'a Vocab,
        companies: &'a [CompanyRecord],
        index: &'a SimilarityIndex,
        group: SeqGroup,
        max_len: usize,
        config: AugmentConfig,
    ) -> Result<Augmenter<'a>> {
        config.validate()?;
        Ok(Augmenter {
            schema,
            vocab,
            index,
            group,
            max_len,
            config,
            companies: companies.iter().map(|c| (c.id.as_str(), c)).collect(),
        })
    }

    pub fn assemble(&self, s: &SolutionRecord, c: &CompanyRecord) -> Result<TokenSequence> {
        assemble_sequence(self.group, s, c, self.schema, self.vocab, self.max_len)
    }

    /// Applies one strategy to the pair whose assembled sequence is `original`.
    pub fn apply(
        &self,
        strategy: Strategy,
        pair: PairRef<'_>,
        original: &TokenSequence,
        rng: &mut Rng,
    ) -> Result<TokenSequence> {
        match strategy {
            Strategy::TokenMask => token_mask(original, self.config.r_t, rng),
            Strategy::FieldMask => field_mask(original, self.config.r_f, rng),
            Strategy::CompanyReplace => {
                if !pair.positive {
                    return Err(Error::invalid("company replacing applies to positive pairs only"));
                }
                let id = company_replace(&pair.company.id, self.index, rng)?;
                let c = self
                    .companies
                    .get(id)
                    .ok_or_else(|| Error::invalid(format!("neighbour `{id}` is not a known company")))?;
                self.assemble(pair.solution, c)
            }
        }
    }

    /// Two views of the pair from two distinct strategies drawn uniformly
    /// without replacement. With a single enabled strategy both views use it
    /// (independently); with none both views are the original sequence.
    pub fn augment_pair(&self, pair: PairRef<'_>, rng: &mut Rng) -> Result<AugmentedPair> {
        let original = self.assemble(pair.solution, pair.company)?;
        let available = self.config.available(pair.positive);
        let strategies: [Option<Strategy>; 2] = match available.len() {
            0 => [None, None],
            1 => [Some(available[0]), Some(available[0])],
            n => {
                let picked = sample(rng, n, 2);
                [Some(available[picked.index(0)]), Some(available[picked.index(1)])]
            }
        };
        let mut view = |s: Option<Strategy>| match s {
            Some(s) => self.apply(s, pair, &original, rng),
            None => Ok(original.clone()),
        };
        let v1 = view(strategies[0])?;
        let v2 = view(strategies[1])?;
        Ok(AugmentedPair {
            views: [v1, v2],
            strategies,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn floor_counts() {
        assert_eq!(mask_count(0.2, 10), 2);
        assert_eq!(mask_count(0.29, 100), 29);
        assert_eq!(mask_count(0.5, 5), 2);
        assert_eq!(mask_count(1.0, 7), 7);
        assert_eq!(mask_count(0.0, 7), 0);
    }

    #[test]
    fn trigram_counts() {
        let t = trigrams("Abab");
        assert_eq!(t.get("aba"), Some(&1.0));
        assert_eq!(t.get("bab"), Some(&1.0));
        assert_eq!(trigrams("ab").get("ab"), Some(&1.0));
        assert!(trigrams("").is_empty());
    }

    #[test]
    fn similarity_extremes() {
        assert!((name_similarity("cloud nexa", "Cloud Nexa") - 1.0).abs() < 1e-12);
        assert_eq!(name_similarity("abc", "xyz"), 0.0);
        assert_eq!(name_similarity("", "xyz"), 0.0);
    }

    #[test]
    fn replace_with_single_neighbour() {
        let index = SimilarityIndex::from_names(&[("a", "alpha"), ("b", "beta")]).unwrap();
        let mut rng = seeded(1);
        for _ in 0..20 {
            assert_eq!(company_replace("a", &index, &mut rng).unwrap(), "b");
        }
        assert!(company_replace("zzz", &index, &mut rng).is_err());
    }

    #[test]
    fn ratio_bounds() {
        let cfg = AugmentConfig {
            r_t: 1.5,
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
