//! Positive-class F1, ROC AUC and the prediction report.

use serde::{Deserialize, Serialize};

/// Patches in a typical whole-slide image.
pub const PATCHES_PER_SLIDE: f64 = 200_000.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Counts predictions `score > threshold` against 0/1 labels.
    pub fn from_scores(scores: &[f64], labels: &[usize], threshold: f64) -> Self {
        assert_eq!(scores.len(), labels.len(), "one score per label");
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s > threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1 {
    pub value: f64,
    /// Precision or recall had a zero denominator (no predicted or no actual
    /// positives).
    pub degenerate: bool,
}

/// `2·tp / (2·tp + fp + fn)`, equal to the harmonic mean of precision and
/// recall whenever both are defined; 0 when there are no positives at all.
pub fn f1_score(c: &Confusion) -> F1 {
    let degenerate = c.tp + c.fp == 0 || c.tp + c.fn_ == 0;
    let denom = 2 * c.tp + c.fp + c.fn_;
    let value = if denom == 0 {
        0.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    };
    F1 { value, degenerate }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("AUC needs both classes, got {positives} positive and {negatives} negative labels")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score at index {0} is NaN")]
    NanScore(usize),
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting
/// one half. Counted exactly in integers via a sort instead of visiting
/// every pair.
pub fn auc_roc(scores: &[f64], labels: &[usize]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(MetricsError::NanScore(i));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the number of won pairs: 2 per strict win, 1 per tie
    let mut doubled: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&k| labels[k] == 1).count() as u128;
        let neg = group.len() as u128 - pos;
        doubled += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    Ok(doubled as f64 / (2 * positives as u128 * negatives as u128) as f64)
}

/// Seconds to classify a whole slide at `patches_per_s`.
pub fn slide_time_s(patches_per_s: f64) -> f64 {
    PATCHES_PER_SLIDE / patches_per_s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub dataset_id: String,
    pub f1: f64,
    pub f1_degenerate: bool,
    pub auc: Option<f64>,
    pub confusion: Confusion,
    pub patches: usize,
    pub seconds: f64,
    pub prediction_rate_patches_per_s: f64,
    pub slide_time_s: f64,
}

impl MetricsReport {
    pub fn new(model_id: String, dataset_id: String, scores: &[f64], labels: &[usize], seconds: f64) -> Self {
        let confusion = Confusion::from_scores(scores, labels, 0.5);
        let f1 = f1_score(&confusion);
        let rate = scores.len() as f64 / seconds;
        Self {
            model_id,
            dataset_id,
            f1: f1.value,
            f1_degenerate: f1.degenerate,
            auc: auc_roc(scores, labels).ok(),
            confusion,
            patches: scores.len(),
            seconds,
            prediction_rate_patches_per_s: rate,
            slide_time_s: slide_time_s(rate),
        }
    }

    pub fn to_text(&self) -> String {
        let c = &self.confusion;
        format!(
            "model {}\ndataset {}\npatches {}\nf1 {:.4}{}\nauc {}\nconfusion tp={} fp={} fn={} tn={}\nprediction rate {:.1} patches/s\nwhole-slide time {:.1} s per {} patches\n",
            self.model_id,
            self.dataset_id,
            self.patches,
            self.f1,
            if self.f1_degenerate { " (degenerate)" } else { "" },
            self.auc.map_or_else(|| "n/a (single class)".to_string(), |a| format!("{a:.4}")),
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            self.prediction_rate_patches_per_s,
            self.slide_time_s,
            PATCHES_PER_SLIDE,
        )
    }
}
