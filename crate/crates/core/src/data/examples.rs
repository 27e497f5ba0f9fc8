use std::collections::{HashMap, HashSet};

use rand::seq::{index, SliceRandom};

use super::records::{CompanyRecord, MatchExample};
use crate::error::{Error, Result};
use crate::rng::sub_rng;

const NEGATIVE_STREAM: u64 = 0x6e65_67;
const SPLIT_STREAM: u64 = 0x73_706c;

/// Expands positive pairs into labelled examples: each positive is followed
/// by `negatives_per_positive` companies drawn uniformly without replacement
/// from the companies that are not positives of the same solution.
///
/// Negatives are distinct across all positives of a solution, so no
/// (solution, company) pair appears twice. Duplicate positives are dropped.
pub fn build_examples(
    positives: &[(String, String)],
    companies: &[CompanyRecord],
    negatives_per_positive: usize,
    seed: u64,
) -> Result<Vec<MatchExample>> {
    if companies.is_empty() {
        return Err(Error::invalid("build_examples: no companies"));
    }
    let mut seen = HashSet::new();
    let positives: Vec<&(String, String)> =
        positives.iter().filter(|p| seen.insert((*p).clone())).collect();

    let mut order: Vec<&str> = Vec::new();
    let mut by_solution: HashMap<&str, Vec<&str>> = HashMap::new();
    for (s, c) in &positives {
        let entry = by_solution.entry(s.as_str()).or_insert_with(|| {
            order.push(s.as_str());
            Vec::new()
        });
        entry.push(c.as_str());
    }

    let mut negatives: HashMap<&str, Vec<&str>> = HashMap::new();
    for (si, s) in order.iter().enumerate() {
        let pos = &by_solution[s];
        let need = pos.len() * negatives_per_positive;
        if pos.len() + need > companies.len() {
            return Err(Error::invalid(format!(
                "build_examples: solution `{s}` has {} positives and needs {need} negatives \
                 but only {} companies exist",
                pos.len(),
                companies.len()
            )));
        }
        let pos_set: HashSet<&str> = pos.iter().copied().collect();
        let pool: Vec<&str> = companies
            .iter()
            .map(|c| c.id.as_str())
            .filter(|id| !pos_set.contains(id))
            .collect();
        if pool.len() < need {
            return Err(Error::invalid(format!(
                "build_examples: solution `{s}` has only {} negative candidates for {need} negatives",
                pool.len()
            )));
        }
        let mut rng = sub_rng(seed, NEGATIVE_STREAM, si as u64);
        let picked = index::sample(&mut rng, pool.len(), need);
        negatives.insert(s, picked.into_iter().map(|i| pool[i]).collect());
    }

    let mut cursor: HashMap<&str, usize> = HashMap::new();
    let mut out = Vec::with_capacity(positives.len() * (1 + negatives_per_positive));
    for (s, c) in &positives {
        out.push(MatchExample::new(s.clone(), c.clone(), 1));
        let at = cursor.entry(s.as_str()).or_insert(0);
        let negs = &negatives[s.as_str()][*at..*at + negatives_per_positive];
        *at += negatives_per_positive;
        for n in negs {
            out.push(MatchExample::new(s.clone(), *n, 0));
        }
    }
    Ok(out)
}

/// Groups of examples: a positive followed by the negatives sampled for it.
fn positive_groups(examples: &[MatchExample]) -> Result<Vec<std::ops::Range<usize>>> {
    let mut groups: Vec<std::ops::Range<usize>> = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        match e.label {
            1 => groups.push(i..i + 1),
            0 => match groups.last_mut() {
                Some(g) if examples[g.start].solution_id == e.solution_id => g.end = i + 1,
                _ => {
                    return Err(Error::invalid(format!(
                        "split_dataset: negative at index {i} does not follow a positive of \
                         solution `{}`",
                        e.solution_id
                    )))
                }
            },
            other => return Err(Error::invalid(format!("label {other} is not 0 or 1"))),
        }
    }
    Ok(groups)
}

/// Splits examples by positive pair; each positive carries its negatives into
/// the same split. Group counts are `round(r * n)` for train and validation,
/// test takes the rest.
pub fn split_dataset(
    examples: &[MatchExample],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<MatchExample>, Vec<MatchExample>, Vec<MatchExample>)> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !(0.0..=1.0).contains(r)) || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    let groups = positive_groups(examples)?;
    let n = groups.len();
    if n < 3 {
        return Err(Error::invalid(format!(
            "split_dataset needs at least 3 positives, got {n}"
        )));
    }
    let n_train = ((rt * n as f64).round() as usize).min(n);
    let n_val = ((rv * n as f64).round() as usize).min(n - n_train);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut sub_rng(seed, SPLIT_STREAM, 0));
    let mut assign = vec![2u8; n];
    for &g in &perm[..n_train] {
        assign[g] = 0;
    }
    for &g in &perm[n_train..n_train + n_val] {
        assign[g] = 1;
    }
    let mut parts = (Vec::new(), Vec::new(), Vec::new());
    for (g, range) in groups.into_iter().enumerate() {
        let dst = match assign[g] {
            0 => &mut parts.0,
            1 => &mut parts.1,
            _ => &mut parts.2,
        };
        dst.extend_from_slice(&examples[range]);
    }
    Ok(parts)
}
