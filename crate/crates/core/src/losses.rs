//! Detection and classification objectives.
//!
//! The detection loss is a batch-adaptive focal loss: each AU's positive
//! term is weighted by that AU's positive rate in the current batch, the
//! negative term by its complement, with a 0.05 offset inside both
//! logarithms so saturated probabilities cannot blow the loss up.

use thiserror::Error;

use crate::diffcore::{DiffError, Tensor};

/// Offset inside both logarithms of the detection loss.
pub const LOG_OFFSET: f64 = 0.05;
/// Fixed alpha used by the plain focal-loss variant.
pub const PLAIN_FOCAL_ALPHA: f64 = 0.25;
/// Probabilities are clamped this far away from 0 and 1 before any log.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("AU label row {row} has length {got}, expected {expected}")]
    LabelWidth {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("AU label must be 0 or 1, got {0}")]
    BadAuLabel(u8),
    #[error("class label {label} out of range 0..{classes}")]
    ClassOutOfRange { label: usize, classes: usize },
    #[error("non-finite probability at batch element {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Ground truth for one training batch: multi-hot AU labels (M x K) and
/// objective-class ids (M).
#[derive(Debug, Clone)]
pub struct BatchLabels {
    pub au: Vec<Vec<u8>>,
    pub class: Vec<usize>,
}

impl BatchLabels {
    pub fn new(au: Vec<Vec<u8>>, class: Vec<usize>, num_classes: usize) -> Result<Self, LossError> {
        if au.is_empty() || au.len() != class.len() {
            return Err(LossError::EmptyBatch);
        }
        let k = au[0].len();
        for (row, labels) in au.iter().enumerate() {
            if labels.len() != k {
                return Err(LossError::LabelWidth {
                    row,
                    got: labels.len(),
                    expected: k,
                });
            }
            for &v in labels {
                if v > 1 {
                    return Err(LossError::BadAuLabel(v));
                }
            }
        }
        for &c in &class {
            if c >= num_classes {
                return Err(LossError::ClassOutOfRange {
                    label: c,
                    classes: num_classes,
                });
            }
        }
        Ok(BatchLabels { au, class })
    }

    pub fn batch_size(&self) -> usize {
        self.au.len()
    }

    pub fn au_count(&self) -> usize {
        self.au[0].len()
    }
}

/// Scalar view of one joint-loss evaluation.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossBreakdown {
    pub detection: f64,
    pub classification: f64,
    pub total: f64,
    pub alphas: Vec<f64>,
}

/// Per-AU positive rate over the batch.
pub fn batch_alpha(au_labels: &[Vec<u8>]) -> Result<Vec<f64>, LossError> {
    if au_labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let m = au_labels.len() as f64;
    let k = au_labels[0].len();
    let mut alphas = vec![0.0; k];
    for (row, labels) in au_labels.iter().enumerate() {
        if labels.len() != k {
            return Err(LossError::LabelWidth {
                row,
                got: labels.len(),
                expected: k,
            });
        }
        for (a, &y) in alphas.iter_mut().zip(labels) {
            if y > 1 {
                return Err(LossError::BadAuLabel(y));
            }
            *a += y as f64;
        }
    }
    for a in &mut alphas {
        *a /= m;
    }
    Ok(alphas)
}

/// Balanced detection loss over an (M, K) probability matrix.
pub fn detection_loss(
    probs: &Tensor,
    au_labels: &[Vec<u8>],
    alphas: &[f64],
) -> Result<Tensor, LossError> {
    detection_loss_impl(probs, au_labels, Some(alphas))
}

/// Same expression with the fixed alpha = 0.25 of the original focal loss.
pub fn focal_loss_plain(probs: &Tensor, au_labels: &[Vec<u8>]) -> Result<Tensor, LossError> {
    detection_loss_impl(probs, au_labels, None)
}

fn detection_loss_impl(
    probs: &Tensor,
    au_labels: &[Vec<u8>],
    alphas: Option<&[f64]>,
) -> Result<Tensor, LossError> {
    if au_labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let m = au_labels.len();
    let k = au_labels[0].len();
    if probs.shape() != [m, k] {
        return Err(DiffError::Shape {
            op: "detection_loss",
            detail: format!("probs {:?} vs labels {m}x{k}", probs.shape()),
        }
        .into());
    }
    if let Some(a) = alphas {
        if a.len() != k {
            return Err(DiffError::Shape {
                op: "detection_loss",
                detail: format!("{} alphas for {k} AUs", a.len()),
            }
            .into());
        }
    }
    if let Some(idx) = probs.values().iter().position(|v| !v.is_finite()) {
        return Err(LossError::NonFinite(idx / k));
    }

    let mut y_flat = Vec::with_capacity(m * k);
    let mut alpha_flat = Vec::with_capacity(m * k);
    let mut alpha_comp = Vec::with_capacity(m * k);
    let mut y_comp = Vec::with_capacity(m * k);
    for labels in au_labels {
        if labels.len() != k {
            return Err(LossError::LabelWidth {
                row: y_flat.len() / k,
                got: labels.len(),
                expected: k,
            });
        }
        for (i, &y) in labels.iter().enumerate() {
            if y > 1 {
                return Err(LossError::BadAuLabel(y));
            }
            let a = alphas.map(|a| a[i]).unwrap_or(PLAIN_FOCAL_ALPHA);
            y_flat.push(y as f64);
            y_comp.push(1.0 - y as f64);
            alpha_flat.push(a);
            alpha_comp.push(1.0 - a);
        }
    }
    let shape = [m, k];
    let y = Tensor::constant(&shape, y_flat);
    let y_not = Tensor::constant(&shape, y_comp);
    let alpha = Tensor::constant(&shape, alpha_flat);
    let alpha_not = Tensor::constant(&shape, alpha_comp);

    let p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let p_not = p.scale(-1.0).add_scalar(1.0);

    // alpha_i (1-p)^2 y log((p + 0.05) / 1.05)
    let pos_log = p.add_scalar(LOG_OFFSET).scale(1.0 / (1.0 + LOG_OFFSET)).ln();
    let pos = alpha
        .mul(&p_not.mul(&p_not)?)?
        .mul(&y)?
        .mul(&pos_log)?;
    // (1-alpha_i) p^2 (1-y) log((1.05 - p) / 1.05)
    let neg_log = p_not
        .add_scalar(LOG_OFFSET)
        .scale(1.0 / (1.0 + LOG_OFFSET))
        .ln();
    let neg = alpha_not.mul(&p.mul(&p)?)?.mul(&y_not)?.mul(&neg_log)?;

    let total = pos.add(&neg)?.sum_all();
    Ok(total.scale(-1.0 / (k as f64 * m as f64)))
}

/// Batch-mean cross-entropy over an (M, C) logit matrix.
pub fn classification_loss(logits: &Tensor, class_labels: &[usize]) -> Result<Tensor, LossError> {
    if class_labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let m = class_labels.len();
    if probs_rank_bad(logits, m) {
        return Err(DiffError::Shape {
            op: "classification_loss",
            detail: format!("logits {:?} vs {m} labels", logits.shape()),
        }
        .into());
    }
    let c = logits.shape()[1];
    let mut one_hot = vec![0.0; m * c];
    for (row, &label) in class_labels.iter().enumerate() {
        if label >= c {
            return Err(LossError::ClassOutOfRange {
                label,
                classes: c,
            });
        }
        one_hot[row * c + label] = 1.0;
    }
    let mask = Tensor::constant(&[m, c], one_hot);
    let probs = logits.softmax()?;
    let p_true = probs.mul(&mask)?.sum_axis(1)?;
    let nll = p_true.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln().scale(-1.0);
    Ok(nll.mean())
}

fn probs_rank_bad(t: &Tensor, m: usize) -> bool {
    t.shape().len() != 2 || t.shape()[0] != m
}

/// Total objective: classification + lambda * detection. The returned tensor
/// backs optimization; the breakdown carries the scalar values.
pub fn joint_loss(
    classification: &Tensor,
    detection: &Tensor,
    alphas: &[f64],
    lambda: f64,
) -> (Tensor, LossBreakdown) {
    let total = classification
        .add(&detection.scale(lambda))
        .expect("scalar losses always conform");
    let breakdown = LossBreakdown {
        detection: detection.item(),
        classification: classification.item(),
        total: total.item(),
        alphas: alphas.to_vec(),
    };
    (total, breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_difference, max_relative_error};

    /// Straight-line evaluation of the detection-loss expression, kept
    /// independent of the tensor graph on purpose.
    fn eq3_oracle(probs: &[Vec<f64>], labels: &[Vec<u8>], alphas: &[f64]) -> f64 {
        let m = labels.len();
        let k = labels[0].len();
        let mut acc = 0.0;
        for j in 0..m {
            for i in 0..k {
                let p = probs[j][i].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                let y = labels[j][i] as f64;
                let a = alphas[i];
                acc += a * (1.0 - p).powi(2) * y * ((p + 0.05) / 1.05).ln()
                    + (1.0 - a) * p.powi(2) * (1.0 - y) * ((1.05 - p) / 1.05).ln();
            }
        }
        -acc / (k as f64 * m as f64)
    }

    fn single(p: f64, y: u8, alpha: f64) -> f64 {
        let probs = Tensor::constant(&[1, 1], vec![p]);
        detection_loss(&probs, &[vec![y]], &[alpha]).unwrap().item()
    }

    #[test]
    fn confident_positive_costs_nothing() {
        assert!(single(1.0, 1, 1.0).abs() < 1e-12);
    }

    #[test]
    fn confident_negative_costs_nothing() {
        assert!(single(0.0, 0, 0.0).abs() < 1e-12);
    }

    #[test]
    fn halfway_positive_matches_oracle() {
        let got = single(0.5, 1, 0.5);
        let want = eq3_oracle(&[vec![0.5]], &[vec![1]], &[0.5]);
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.0808).abs() < 1e-4);
    }

    #[test]
    fn plain_focal_uses_quarter_alpha() {
        let probs = Tensor::constant(&[1, 1], vec![0.5]);
        let got = focal_loss_plain(&probs, &[vec![1]]).unwrap().item();
        let want = eq3_oracle(&[vec![0.5]], &[vec![1]], &[0.25]);
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.0404).abs() < 1e-4);

        let perfect = focal_loss_plain(&Tensor::constant(&[1, 1], vec![1.0]), &[vec![1]])
            .unwrap()
            .item();
        assert!(perfect.abs() < 1e-12);
    }

    #[test]
    fn plain_and_balanced_differ_off_quarter_rate() {
        // Positive rate 0.5 != 0.25, so the two weightings must disagree.
        let labels = vec![vec![1], vec![0]];
        let probs = Tensor::constant(&[2, 1], vec![0.7, 0.4]);
        let alphas = batch_alpha(&labels).unwrap();
        assert_eq!(alphas, vec![0.5]);
        let balanced = detection_loss(&probs, &labels, &alphas).unwrap().item();
        let plain = focal_loss_plain(&probs, &labels).unwrap().item();
        assert!((balanced - plain).abs() > 1e-6);
    }

    #[test]
    fn batch_alpha_counts_positives() {
        let col = |bits: [u8; 4]| bits.iter().map(|&b| vec![b]).collect::<Vec<_>>();
        assert_eq!(batch_alpha(&col([1, 1, 1, 1])).unwrap(), vec![1.0]);
        assert_eq!(batch_alpha(&col([0, 0, 0, 0])).unwrap(), vec![0.0]);
        assert_eq!(batch_alpha(&col([1, 0, 1, 0])).unwrap(), vec![0.5]);
        assert!(matches!(batch_alpha(&[]), Err(LossError::EmptyBatch)));
    }

    #[test]
    fn uniform_logits_cost_ln_c() {
        let logits = Tensor::constant(&[1, 5], vec![0.0; 5]);
        let loss = classification_loss(&logits, &[2]).unwrap().item();
        assert!((loss - 5.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn dominant_true_logit_drives_loss_to_zero() {
        let logits = Tensor::constant(&[1, 5], vec![80.0, 0.0, 0.0, 0.0, 0.0]);
        let loss = classification_loss(&logits, &[0]).unwrap().item();
        assert!(loss < 1e-9);
    }

    #[test]
    fn spiked_logits_match_softmax_oracle() {
        // -ln(e^2 / (e^2 + 4)) for five classes.
        let logits = Tensor::constant(&[1, 5], vec![2.0, 0.0, 0.0, 0.0, 0.0]);
        let loss = classification_loss(&logits, &[0]).unwrap().item();
        let want = -(2.0_f64.exp() / (2.0_f64.exp() + 4.0)).ln();
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 0.43275).abs() < 1e-4);

        // The same spike over three classes lands near 0.2395.
        let logits3 = Tensor::constant(&[1, 3], vec![2.0, 0.0, 0.0]);
        let loss3 = classification_loss(&logits3, &[0]).unwrap().item();
        assert!((loss3 - 0.2395).abs() < 1e-4);
    }

    #[test]
    fn class_label_out_of_range_is_rejected() {
        let logits = Tensor::constant(&[1, 5], vec![0.0; 5]);
        assert!(matches!(
            classification_loss(&logits, &[5]),
            Err(LossError::ClassOutOfRange { label: 5, .. })
        ));
    }

    #[test]
    fn non_finite_probs_are_rejected() {
        let probs = Tensor::constant(&[1, 1], vec![f64::NAN]);
        assert!(matches!(
            detection_loss(&probs, &[vec![1]], &[1.0]),
            Err(LossError::NonFinite(0))
        ));
    }

    #[test]
    fn joint_loss_is_additive() {
        let cls = Tensor::scalar(1.0);
        let detc = Tensor::scalar(0.2);
        let (total, breakdown) = joint_loss(&cls, &detc, &[0.5], 0.75);
        assert!((total.item() - 1.15).abs() < 1e-12);
        assert!((breakdown.total - breakdown.classification - 0.75 * breakdown.detection).abs() < 1e-12);

        let (zero_lambda, b0) = joint_loss(&cls, &detc, &[0.5], 0.0);
        assert_eq!(zero_lambda.item(), 1.0);
        assert_eq!(b0.detection, 0.2);
    }

    #[test]
    fn detection_grads_match_finite_differences() {
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..10 {
            let m = 1 + (next() * 4.0) as usize;
            let k = 1 + (next() * 3.0) as usize;
            let labels: Vec<Vec<u8>> = (0..m)
                .map(|_| (0..k).map(|_| (next() > 0.5) as u8).collect())
                .collect();
            let data: Vec<f64> = (0..m * k).map(|_| 0.05 + 0.9 * next()).collect();
            let probs = Tensor::param(&[m, k], data);
            let alphas = batch_alpha(&labels).unwrap();

            let loss = detection_loss(&probs, &labels, &alphas).unwrap();
            loss.backward().unwrap();
            let analytic = probs.grad().unwrap();

            let probs_fd = probs.clone();
            let labels_fd = labels.clone();
            let alphas_fd = alphas.clone();
            let fd = finite_difference(&probs, 1e-6, move || {
                detection_loss(&probs_fd, &labels_fd, &alphas_fd)
                    .unwrap()
                    .item()
            })
            .unwrap();
            assert!(max_relative_error(&analytic, &fd) < 1e-6);
        }
    }

    #[test]
    fn classification_grads_match_finite_differences() {
        let logits = Tensor::param(&[2, 5], vec![0.3, -1.0, 0.7, 0.1, -0.4, 1.2, 0.0, -0.2, 0.5, -0.9]);
        let labels = vec![2usize, 0usize];
        let loss = classification_loss(&logits, &labels).unwrap();
        loss.backward().unwrap();
        let analytic = logits.grad().unwrap();

        let logits_fd = logits.clone();
        let fd = finite_difference(&logits, 1e-6, move || {
            classification_loss(&logits_fd, &labels).unwrap().item()
        })
        .unwrap();
        assert!(max_relative_error(&analytic, &fd) < 1e-6);
    }

    #[test]
    fn positive_term_is_monotone_decreasing_in_p() {
        let mut last = f64::INFINITY;
        for step in 1..100 {
            let p = step as f64 / 100.0;
            let value = single(p, 1, 0.6);
            assert!(value <= last + 1e-15, "loss rose at p={p}");
            last = value;
        }
    }

    #[test]
    fn detection_loss_is_nonnegative_and_permutation_invariant() {
        let labels = vec![vec![1, 0, 1], vec![0, 0, 1], vec![1, 1, 0]];
        let data = vec![0.9, 0.2, 0.6, 0.4, 0.1, 0.8, 0.7, 0.55, 0.3];
        let probs = Tensor::constant(&[3, 3], data.clone());
        let alphas = batch_alpha(&labels).unwrap();
        let base = detection_loss(&probs, &labels, &alphas).unwrap().item();
        assert!(base >= 0.0);

        // Swap batch rows 0 and 2.
        let swapped_labels = vec![labels[2].clone(), labels[1].clone(), labels[0].clone()];
        let mut swapped = data.clone();
        for c in 0..3 {
            swapped.swap(c, 6 + c);
        }
        let probs_sw = Tensor::constant(&[3, 3], swapped);
        let rows = detection_loss(&probs_sw, &swapped_labels, &alphas).unwrap().item();
        assert!((base - rows).abs() < 1e-12);

        // Swap AU columns 0 and 1 (alphas permuted the same way).
        let col_labels: Vec<Vec<u8>> = labels
            .iter()
            .map(|r| vec![r[1], r[0], r[2]])
            .collect();
        let col_data: Vec<f64> = data
            .chunks(3)
            .flat_map(|r| vec![r[1], r[0], r[2]])
            .collect();
        let col_alphas = vec![alphas[1], alphas[0], alphas[2]];
        let probs_col = Tensor::constant(&[3, 3], col_data);
        let cols = detection_loss(&probs_col, &col_labels, &col_alphas).unwrap().item();
        assert!((base - cols).abs() < 1e-12);
    }
}
