//! Recognition and detection scoring: WAR, UAR, macro/weighted F1, per-AU F1.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction/truth length mismatch: {preds} vs {truth}")]
    LengthMismatch { preds: usize, truth: usize },
    #[error("class id {id} out of range 0..{classes}")]
    OutOfRange { id: usize, classes: usize },
    #[error("no scored samples")]
    Empty,
    #[error("AU label shape mismatch")]
    AuShape,
}

/// C x C count matrix; rows index ground truth, columns the prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Ground-truth support of class `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c * self.classes..(c + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn predicted(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.count(t, c)).sum()
    }

    /// Merge another matrix of the same shape (used to pool LOSO folds).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "confusion shape mismatch");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.classes)
    }
}

/// Tally predicted against true class ids.
pub fn confusion(
    preds: &[usize],
    truth: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            truth: truth.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &t) in preds.iter().zip(truth) {
        if p >= classes {
            return Err(MetricsError::OutOfRange { id: p, classes });
        }
        if t >= classes {
            return Err(MetricsError::OutOfRange { id: t, classes });
        }
        cm.record(t, p);
    }
    Ok(cm)
}

/// Weighted average recall (micro accuracy): sum of diagonal over N.
pub fn war(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let n = cm.total();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    let hits: u64 = (0..cm.classes()).map(|c| cm.count(c, c)).sum();
    Ok(hits as f64 / n as f64)
}

/// Unweighted average recall over classes present in the ground truth.
/// Returns the score and the number of contributing classes.
pub fn uar(cm: &ConfusionMatrix) -> Result<(f64, usize), MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::Empty);
    }
    let mut acc = 0.0;
    let mut present = 0;
    for c in 0..cm.classes() {
        let support = cm.support(c);
        if support > 0 {
            acc += cm.count(c, c) as f64 / support as f64;
            present += 1;
        }
    }
    Ok((acc / present as f64, present))
}

/// Per-class F1 (0/0 defined as 0), macro mean over all classes, and
/// support-weighted mean.
pub fn f1_scores(cm: &ConfusionMatrix) -> Result<(Vec<f64>, f64, f64), MetricsError> {
    let n = cm.total();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    let c = cm.classes();
    let mut per_class = vec![0.0; c];
    let mut weighted = 0.0;
    for (cls, f1) in per_class.iter_mut().enumerate() {
        let tp = cm.count(cls, cls);
        let fp = cm.predicted(cls) - tp;
        let fn_ = cm.support(cls) - tp;
        let denom = 2 * tp + fp + fn_;
        *f1 = if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
        weighted += cm.support(cls) as f64 / n as f64 * *f1;
    }
    let macro_f1 = per_class.iter().sum::<f64>() / c as f64;
    Ok((per_class, macro_f1, weighted))
}

/// Binary F1 per AU column of two (M, K) multi-hot matrices.
pub fn au_f1(pred_labels: &[Vec<u8>], true_labels: &[Vec<u8>]) -> Result<Vec<f64>, MetricsError> {
    if pred_labels.len() != true_labels.len() || pred_labels.is_empty() {
        return Err(MetricsError::AuShape);
    }
    let k = true_labels[0].len();
    let mut tp = vec![0u64; k];
    let mut fp = vec![0u64; k];
    let mut fn_ = vec![0u64; k];
    for (p_row, t_row) in pred_labels.iter().zip(true_labels) {
        if p_row.len() != k || t_row.len() != k {
            return Err(MetricsError::AuShape);
        }
        for i in 0..k {
            match (p_row[i], t_row[i]) {
                (1, 1) => tp[i] += 1,
                (1, 0) => fp[i] += 1,
                (0, 1) => fn_[i] += 1,
                _ => {}
            }
        }
    }
    Ok((0..k)
        .map(|i| {
            let denom = 2 * tp[i] + fp[i] + fn_[i];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[i] as f64 / denom as f64
            }
        })
        .collect())
}

/// Full scoring bundle for one evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub war: f64,
    pub uar: f64,
    /// Number of classes that appear in the ground truth (UAR denominator).
    pub present_classes: usize,
    /// Classes with no truth and no predictions; their F1 is 0 by convention.
    pub absent_classes: Vec<usize>,
    pub f1_macro: f64,
    pub wf1: f64,
    pub per_class_f1: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_au_f1: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub au_ids: Option<Vec<u32>>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self, MetricsError> {
        let war = war(&cm)?;
        let (uar, present) = uar(&cm)?;
        let (per_class_f1, f1_macro, wf1) = f1_scores(&cm)?;
        let absent = (0..cm.classes())
            .filter(|&c| cm.support(c) == 0 && cm.predicted(c) == 0)
            .collect();
        Ok(MetricsReport {
            war,
            uar,
            present_classes: present,
            absent_classes: absent,
            f1_macro,
            wf1,
            per_class_f1,
            per_au_f1: None,
            au_ids: None,
            confusion: cm,
        })
    }

    pub fn with_au_f1(mut self, au_ids: Vec<u32>, per_au: Vec<f64>) -> Self {
        self.au_ids = Some(au_ids);
        self.per_au_f1 = Some(per_au);
        self
    }

    /// key=value rendering, one entry per line, confusion rows included.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "war={:.6}", self.war);
        let _ = writeln!(out, "uar={:.6}", self.uar);
        let _ = writeln!(out, "present_classes={}", self.present_classes);
        if !self.absent_classes.is_empty() {
            let tags: Vec<String> = self.absent_classes.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "absent_classes={}", tags.join(","));
        }
        let _ = writeln!(out, "f1={:.6}", self.f1_macro);
        let _ = writeln!(out, "wf1={:.6}", self.wf1);
        for (c, f1) in self.per_class_f1.iter().enumerate() {
            let _ = writeln!(out, "f1_class_{c}={f1:.6}");
        }
        if let (Some(ids), Some(scores)) = (&self.au_ids, &self.per_au_f1) {
            for (id, f1) in ids.iter().zip(scores) {
                let _ = writeln!(out, "f1_au{id}={f1:.6}");
            }
        }
        for (t, row) in self.confusion.rows().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "confusion_row_{t}={}", cells.join(","));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
