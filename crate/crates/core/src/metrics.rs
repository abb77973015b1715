//! Detection metrics and the ratio-stratified report.
//!
//! Scores above 0.5 (strictly) count as positive. Precision, recall and the
//! F-scores are stored in percent; AUC stays in `[0, 1]`.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{sample_eval_set, Level, Ratio};
use crate::error::{Error, Result};
use crate::tape::Mat;

pub const DECISION_THRESHOLD: f64 = 0.5;

/// `(1+β²)·P·R / (β²·P + R)`, defined as 0 when `P = R = 0`.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted half (Mann–Whitney via average ranks).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes; got {n_pos} positives and {n_neg} negatives"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                pos_rank_sum += rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_scores(scores: &[f64], labels: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s > DECISION_THRESHOLD, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    /// `tp / (tp + fp)`, 0 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
    pub auc: f64,
    pub confusion: Confusion,
}

impl LevelMetrics {
    pub fn compute(scores: &[f64], labels: &[u8]) -> Result<Self> {
        let confusion = Confusion::from_scores(scores, labels);
        let (p, r) = (confusion.precision(), confusion.recall());
        Ok(Self {
            precision: 100.0 * p,
            recall: 100.0 * r,
            f1: 100.0 * f_beta(p, r, 1.0),
            f2: 100.0 * f_beta(p, r, 2.0),
            auc: auc(scores, labels)?,
            confusion,
        })
    }

    /// Stored F-scores agree with stored precision and recall.
    pub fn is_consistent(&self, tol: f64) -> bool {
        let (p, r) = (self.precision / 100.0, self.recall / 100.0);
        (100.0 * f_beta(p, r, 1.0) - self.f1).abs() <= tol && (100.0 * f_beta(p, r, 2.0) - self.f2).abs() <= tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub level: Level,
    pub ratio: Ratio,
    pub n_positive: usize,
    pub n_negative: usize,
    pub metrics: Option<LevelMetrics>,
    /// Why `metrics` is missing.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub config_hash: String,
    pub ablation: String,
    /// Metrics are computed once over the pooled evaluation items of a run.
    pub averaging: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: RunMeta,
    pub entries: Vec<ReportEntry>,
}

impl MetricsReport {
    pub fn get(&self, level: Level, ratio: Ratio) -> Option<&LevelMetrics> {
        self.entries
            .iter()
            .find(|e| e.level == level && e.ratio == ratio)
            .and_then(|e| e.metrics.as_ref())
    }

    pub fn is_consistent(&self) -> bool {
        self.entries.iter().filter_map(|e| e.metrics.as_ref()).all(|m| m.is_consistent(1e-9))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Levels × ratios grid of precision, recall, F1, F2 and AUC.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ablation: {}  seed: {}  config: {}", self.meta.ablation, self.meta.seed, self.meta.config_hash);
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>6} {:>6} {:>9} {:>7} {:>7} {:>7} {:>7}",
            "level", "ratio", "pos", "neg", "precision", "recall", "F1", "F2", "AUC"
        );
        for e in &self.entries {
            match &e.metrics {
                Some(m) => {
                    let _ = writeln!(
                        out,
                        "{:<8} {:>6} {:>6} {:>6} {:>9.2} {:>7.2} {:>7.2} {:>7.2} {:>7.4}",
                        e.level.name(),
                        e.ratio.to_string(),
                        e.n_positive,
                        e.n_negative,
                        m.precision,
                        m.recall,
                        m.f1,
                        m.f2,
                        m.auc
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        "{:<8} {:>6}  unavailable: {}",
                        e.level.name(),
                        e.ratio.to_string(),
                        e.error.as_deref().unwrap_or("unknown")
                    );
                }
            }
        }
        out
    }
}

/// Sample each ratio's evaluation items from `labels` (per level,
/// `S × nodes`) and score them with `probs`. Entries that cannot be formed
/// carry an error instead of metrics.
pub fn evaluate_scores(probs: &[Mat; 3], labels: &[Array2<u8>; 3], ratios: &[Ratio], seed: u64) -> Result<Vec<ReportEntry>> {
    let mut entries = Vec::new();
    for (li, level) in Level::ALL.into_iter().enumerate() {
        if probs[li].dim() != labels[li].dim() {
            return Err(Error::Shape(format!(
                "{level} scores {:?} vs labels {:?}",
                probs[li].dim(),
                labels[li].dim()
            )));
        }
        let n_pos = labels[li].iter().filter(|&&y| y == 1).count();
        let n_neg = labels[li].len() - n_pos;
        for (ri, &ratio) in ratios.iter().enumerate() {
            let count = ratio.max_positives(n_pos, n_neg);
            let sub_seed = seed ^ ((li as u64) << 40) ^ ((ri as u64) << 32);
            let picked = if count == 0 {
                Err(Error::SamplingInfeasible(format!(
                    "{n_pos} positives and {n_neg} negatives cannot form one {ratio} group"
                )))
            } else {
                sample_eval_set(labels[li].view(), ratio, count, sub_seed)
            };
            let entry = match picked {
                Ok(sel) => {
                    let scores: Vec<f64> = sel.items.iter().map(|&(t, n)| probs[li][[t, n]]).collect();
                    let ys: Vec<u8> = sel.items.iter().map(|&(t, n)| labels[li][[t, n]]).collect();
                    let (metrics, error) = match LevelMetrics::compute(&scores, &ys) {
                        Ok(m) => (Some(m), None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    ReportEntry {
                        level,
                        ratio,
                        n_positive: sel.n_positive,
                        n_negative: sel.n_negative,
                        metrics,
                        error,
                    }
                }
                Err(e) => ReportEntry {
                    level,
                    ratio,
                    n_positive: 0,
                    n_negative: 0,
                    metrics: None,
                    error: Some(e.to_string()),
                },
            };
            entries.push(entry);
        }
    }
    Ok(entries)
}
