//! Ranking, offline ranking metrics and the metrics report file.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cut-offs for precision and recall.
pub const K_VALUES: [usize; 3] = [10, 100, 500];

/// Sorts `(id, score)` by score descending, ties by id ascending.
pub fn sort_ranking<T>(items: &mut [(String, f64, T)]) {
    items.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
}

/// Mean over positive ranks `r` of (positives at ranks ≤ r) / r.
/// `None` without positives.
pub fn average_precision(ranked_labels: &[u8]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &y) in ranked_labels.iter().enumerate() {
        if y == 1 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half (rank-sum form with mid-ranks). `None` unless both
/// classes are present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Mid-ranks (1-based) over ascending scores.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Positives among the first `min(k, n)` items divided by `min(k, n)`.
pub fn precision_at(ranked_labels: &[u8], k: usize) -> Option<f64> {
    let k = k.min(ranked_labels.len());
    (k > 0).then(|| ranked_labels[..k].iter().filter(|&&y| y == 1).count() as f64 / k as f64)
}

/// Positives among the first `min(k, n)` items divided by all positives.
pub fn recall_at(ranked_labels: &[u8], k: usize) -> Option<f64> {
    let total = ranked_labels.iter().filter(|&&y| y == 1).count();
    let k = k.min(ranked_labels.len());
    (total > 0).then(|| ranked_labels[..k].iter().filter(|&&y| y == 1).count() as f64 / total as f64)
}

/// Metrics of one solution's ranked candidate pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionMetrics {
    pub solution_id: String,
    pub candidates: usize,
    pub positives: usize,
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    /// Indexed like [`K_VALUES`].
    pub precision: Vec<f64>,
    pub recall: Vec<Option<f64>>,
}

impl SolutionMetrics {
    /// Ranks `(company id, score, label)` candidates and computes every metric.
    pub fn compute(solution_id: &str, mut candidates: Vec<(String, f64, u8)>) -> SolutionMetrics {
        sort_ranking(&mut candidates);
        let labels: Vec<u8> = candidates.iter().map(|c| c.2).collect();
        let scores: Vec<f64> = candidates.iter().map(|c| c.1).collect();
        SolutionMetrics {
            solution_id: solution_id.to_string(),
            candidates: labels.len(),
            positives: labels.iter().filter(|&&y| y == 1).count(),
            ap: average_precision(&labels),
            auc: auc(&scores, &labels),
            precision: K_VALUES.iter().map(|&k| precision_at(&labels, k).unwrap_or(0.0)).collect(),
            recall: K_VALUES.iter().map(|&k| recall_at(&labels, k)).collect(),
        }
    }
}

/// Summary metric names in report order.
pub fn metric_names() -> Vec<String> {
    let mut names = vec!["MAP".to_string(), "AUC".to_string()];
    names.extend(K_VALUES.iter().map(|k| format!("P@{k}")));
    names.extend(K_VALUES.iter().map(|k| format!("R@{k}")));
    names
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMeta {
    /// Name of the evaluated run (e.g. `full` or an ablation flag).
    pub run: String,
    /// Hex SHA-256 of the canonical configuration.
    pub fingerprint: String,
    pub seed: u64,
    /// Candidate-pool construction used at evaluation.
    pub pool: String,
}

/// Averages over solutions plus the per-solution breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub metrics: BTreeMap<String, f64>,
    pub per_solution: Vec<SolutionMetrics>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ReportLine {
    Meta(ReportMeta),
    Metric { name: String, value: f64 },
    Solution(SolutionMetrics),
}

impl MetricsReport {
    /// MAP, R@k and AUC average over solutions where they are defined;
    /// P@k averages over solutions with at least one positive.
    pub fn from_solutions(meta: ReportMeta, per_solution: Vec<SolutionMetrics>) -> MetricsReport {
        let with_pos: Vec<&SolutionMetrics> = per_solution.iter().filter(|s| s.positives > 0).collect();
        let skipped = per_solution.len() - with_pos.len();
        if skipped > 0 {
            log::warn!("{skipped} solution(s) without positives excluded from MAP/P/R");
        }
        let mut metrics = BTreeMap::new();
        metrics.insert("MAP".into(), mean(with_pos.iter().filter_map(|s| s.ap)));
        metrics.insert("AUC".into(), mean(per_solution.iter().filter_map(|s| s.auc)));
        for (i, k) in K_VALUES.iter().enumerate() {
            metrics.insert(format!("P@{k}"), mean(with_pos.iter().map(|s| s.precision[i])));
            metrics.insert(format!("R@{k}"), mean(with_pos.iter().filter_map(|s| s.recall[i])));
        }
        MetricsReport {
            meta,
            metrics,
            per_solution,
        }
    }

    pub fn map(&self) -> f64 {
        self.metrics["MAP"]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Line-delimited JSON: one meta line, one line per summary metric, one
    /// line per solution.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut line = |l: &ReportLine| {
            serde_json::to_writer(&mut out, l).expect("report line serializes");
            out.write_all(b"\n").expect("write to vec");
        };
        line(&ReportLine::Meta(self.meta.clone()));
        for name in metric_names() {
            if let Some(&value) = self.metrics.get(&name) {
                line(&ReportLine::Metric { name, value });
            }
        }
        for s in &self.per_solution {
            line(&ReportLine::Solution(s.clone()));
        }
        out
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, path: &Path) -> Result<MetricsReport> {
        let mut meta = None;
        let mut metrics = BTreeMap::new();
        let mut per_solution = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            match serde_json::from_str::<ReportLine>(raw).map_err(|e| err(e.to_string()))? {
                ReportLine::Meta(m) => {
                    if meta.replace(m).is_some() {
                        return Err(err("duplicate meta line".into()));
                    }
                }
                ReportLine::Metric { name, value } => {
                    if metrics.insert(name, value).is_some() {
                        return Err(err("duplicate metric".into()));
                    }
                }
                ReportLine::Solution(s) => per_solution.push(s),
            }
        }
        let meta = meta.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "report has no meta line".into(),
        })?;
        Ok(MetricsReport {
            meta,
            metrics,
            per_solution,
        })
    }

    pub fn load(path: &Path) -> Result<MetricsReport> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
