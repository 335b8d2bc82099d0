//! Classification metrics.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("ROC-AUC needs at least one positive and one negative label")]
    SingleClass,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("expected {expected} reports, got {got}")]
    SeedCount { expected: usize, got: usize },
}

/// 2×2 confusion counts with class 1 (quark) as positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Threshold metrics. `degenerate` is set when a precision, recall or F1
/// denominator was zero and the value was reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Predicts class 1 iff `score ≥ threshold`.
pub fn confusion_and_prf(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Prf, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let mut degenerate = false;
    let accuracy = ratio(c.tp + c.tn, c.total(), &mut degenerate);
    let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate);
    let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Ok(Prf {
        confusion: c,
        accuracy,
        precision,
        recall,
        f1,
        degenerate,
    })
}

/// Mann–Whitney AUC with average ranks for ties.
///
/// Ranks are kept doubled so every intermediate is an integer; the result is
/// a single correctly rounded division and equals the pairwise count
/// `(wins + ties/2) / (n₊ n₋)` exactly.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as u128;
    let n_neg = scores.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].total_cmp(&scores[order[i]]).is_eq() {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the doubled average rank i+j+2
        let doubled = (i + j + 2) as u128;
        rank_sum2 += doubled * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        i = j + 1;
    }
    let numerator = rank_sum2 - n_pos * (n_pos + 1);
    Ok(numerator as f64 / (2 * n_pos * n_neg) as f64)
}

/// O(n²) reference: `(2·wins + ties) / (2 n₊ n₋)`.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y != 1).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricError::SingleClass);
    }
    let mut twice: u128 = 0;
    for &p in &pos {
        for &n in &neg {
            twice += match p.total_cmp(&n) {
                core::cmp::Ordering::Greater => 2,
                core::cmp::Ordering::Equal => 1,
                core::cmp::Ordering::Less => 0,
            };
        }
    }
    Ok(twice as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64)
}

/// Full evaluation summary for one run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub roc_auc: f64,
    pub confusion: Confusion,
    pub degenerate: bool,
    pub inference_ms_per_image: f64,
}

impl MetricReport {
    /// Threshold metrics at 0.5 plus ROC-AUC (0.5 with the degeneracy flag
    /// when only one class is present).
    pub fn from_scores(scores: &[f64], labels: &[u8]) -> Result<Self, MetricError> {
        let prf = confusion_and_prf(scores, labels, 0.5)?;
        let (roc_auc, single) = match roc_auc(scores, labels) {
            Ok(a) => (a, false),
            Err(MetricError::SingleClass) => (0.5, true),
            Err(e) => return Err(e),
        };
        Ok(MetricReport {
            accuracy: prf.accuracy,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            roc_auc,
            confusion: prf.confusion,
            degenerate: prf.degenerate || single,
            inference_ms_per_image: 0.0,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Arithmetic mean and sample (n − 1) standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd::default();
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AggregateReport {
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub roc_auc: MeanStd,
    pub inference_ms: MeanStd,
}

/// Per-metric mean ± sample std over repeated seeds.
pub fn aggregate_seeds(reports: &[MetricReport], expected: usize) -> Result<AggregateReport, MetricError> {
    if reports.len() != expected {
        return Err(MetricError::SeedCount {
            expected,
            got: reports.len(),
        });
    }
    let pick = |f: fn(&MetricReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        accuracy: pick(|r| r.accuracy),
        precision: pick(|r| r.precision),
        recall: pick(|r| r.recall),
        f1: pick(|r| r.f1),
        roc_auc: pick(|r| r.roc_auc),
        inference_ms: pick(|r| r.inference_ms_per_image),
    })
}
