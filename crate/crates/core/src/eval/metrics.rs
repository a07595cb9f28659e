use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::ClassLabel;

/// Standard score for a two-sided 95% normal interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("predictions ({preds}) and labels ({labels}) differ in length")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("no samples")]
    EmptyInput,
    #[error("class value {0} outside 1..={1}")]
    LabelOutOfRange(usize, usize),
    #[error("sensitivity is undefined without positive labels")]
    NoPositives,
}

fn check(preds: usize, labels: usize) -> Result<(), MetricError> {
    if preds != labels {
        return Err(MetricError::LengthMismatch { preds, labels });
    }
    if preds == 0 {
        return Err(MetricError::EmptyInput);
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[ClassLabel], labels: &[ClassLabel]) -> Result<f64, MetricError> {
    check(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Accuracy after collapsing {LG, HG} to positive and NNeo to negative.
pub fn binary_accuracy(preds: &[ClassLabel], labels: &[ClassLabel]) -> Result<f64, MetricError> {
    check(preds.len(), labels.len())?;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| p.is_lesion() == l.is_lesion())
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// TP / (TP + FN) under the NNeo-vs-lesion collapse.
pub fn sensitivity(preds: &[ClassLabel], labels: &[ClassLabel]) -> Result<f64, MetricError> {
    check(preds.len(), labels.len())?;
    let (mut tp, mut fneg) = (0usize, 0usize);
    for (p, l) in preds.iter().zip(labels) {
        if l.is_lesion() {
            if p.is_lesion() {
                tp += 1;
            } else {
                fneg += 1;
            }
        }
    }
    if tp + fneg == 0 {
        return Err(MetricError::NoPositives);
    }
    Ok(tp as f64 / (tp + fneg) as f64)
}

/// Quadratic weighted kappa over 1-based class values in `1..=k`.
///
/// `1 - Σ w·O / Σ w·E` with `w_ij = (i - j)^2`, `O` the confusion counts and
/// `E` the outer product of the marginals scaled to sum to N. When both
/// sides sit in one shared class the expected disagreement is zero; the
/// vectors are then identical and the result is 1.
pub fn qwk(preds: &[usize], labels: &[usize], k: usize) -> Result<f64, MetricError> {
    check(preds.len(), labels.len())?;
    for &v in preds.iter().chain(labels) {
        if v == 0 || v > k {
            return Err(MetricError::LabelOutOfRange(v, k));
        }
    }
    let n = preds.len() as f64;
    let mut observed = vec![0.0; k * k];
    let mut row = vec![0.0; k];
    let mut col = vec![0.0; k];
    for (&p, &l) in preds.iter().zip(labels) {
        observed[(l - 1) * k + (p - 1)] += 1.0;
        row[l - 1] += 1.0;
        col[p - 1] += 1.0;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64) - (j as f64)).powi(2);
            num += w * observed[i * k + j];
            den += w * row[i] * col[j] / n;
        }
    }
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - num / den)
}

pub fn qwk_labels(preds: &[ClassLabel], labels: &[ClassLabel]) -> Result<f64, MetricError> {
    let p: Vec<usize> = preds.iter().map(|l| l.ordinal()).collect();
    let l: Vec<usize> = labels.iter().map(|l| l.ordinal()).collect();
    qwk(&p, &l, crate::label::NUM_CLASSES)
}

/// A metric value with its normal-approximation interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub m: f64,
    pub n: usize,
    /// `sqrt(m (1 - m) / n)`; absent for metrics that are not Bernoulli
    /// proportions (QWK).
    pub se: Option<f64>,
    pub z: f64,
    pub margin: Option<f64>,
}

impl MetricReport {
    pub fn without_interval(metric: &str, m: f64, n: usize) -> Self {
        Self {
            metric: metric.to_string(),
            m,
            n,
            se: None,
            z: Z_95,
            margin: None,
        }
    }
}

/// Gaussian interval for a proportion: `margin = z * sqrt(m (1 - m) / n)`.
pub fn confidence_interval(metric: &str, m: f64, n: usize, z: f64) -> MetricReport {
    assert!((0.0..=1.0).contains(&m), "proportion {m} outside [0, 1]");
    assert!(n >= 1, "interval needs at least one sample");
    let se = (m * (1.0 - m) / n as f64).sqrt();
    MetricReport {
        metric: metric.to_string(),
        m,
        n,
        se: Some(se),
        z,
        margin: Some(z * se),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::*;

    #[test]
    fn perfect_agreement() {
        let v = [NonNeoplastic, LowGrade, HighGrade];
        assert_eq!(accuracy(&v, &v), Ok(1.0));
        assert_eq!(binary_accuracy(&v, &v), Ok(1.0));
        assert_eq!(sensitivity(&v, &v), Ok(1.0));
        assert_eq!(qwk_labels(&v, &v), Ok(1.0));
    }

    #[test]
    fn lesion_collapse() {
        let p = [LowGrade, LowGrade];
        let l = [HighGrade, HighGrade];
        assert_eq!(accuracy(&p, &l), Ok(0.0));
        assert_eq!(binary_accuracy(&p, &l), Ok(1.0));
        assert_eq!(sensitivity(&p, &l), Ok(1.0));
        assert_eq!(sensitivity(&[NonNeoplastic], &[HighGrade]), Ok(0.0));
        assert_eq!(
            sensitivity(&[HighGrade], &[NonNeoplastic]),
            Err(MetricError::NoPositives)
        );
    }

    #[test]
    fn input_errors() {
        assert_eq!(
            accuracy(&[HighGrade], &[]),
            Err(MetricError::LengthMismatch { preds: 1, labels: 0 })
        );
        assert_eq!(accuracy(&[], &[]), Err(MetricError::EmptyInput));
        assert_eq!(qwk(&[0], &[1], 3), Err(MetricError::LabelOutOfRange(0, 3)));
    }

    #[test]
    fn qwk_anti_ordered_binary_extremes() {
        // labels {1,1,3,3} vs preds {3,3,1,1}: O off-diagonal only,
        // sum wO = 4*4 = 16, E = 1 everywhere, sum wE = 2*4 = 8 -> 1 - 16/8
        assert_eq!(qwk(&[3, 3, 1, 1], &[1, 1, 3, 3], 3), Ok(-1.0));
    }

    #[test]
    fn qwk_single_shared_class_is_one() {
        assert_eq!(qwk(&[2, 2], &[2, 2], 3), Ok(1.0));
    }

    #[test]
    fn interval_examples() {
        let r = confidence_interval("acc", 0.9344, 900, Z_95);
        assert!((r.margin.unwrap() - 0.0162).abs() < 5e-4);
        let r = confidence_interval("acc", 1.0, 37, Z_95);
        assert_eq!(r.margin, Some(0.0));
        let r = confidence_interval("acc", 0.8491, 232, Z_95);
        assert!((r.margin.unwrap() - 0.0461).abs() < 5e-4);
    }
}
