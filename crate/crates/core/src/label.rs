//! Ordinal diagnosis classes and per-tile class probabilities.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of diagnosis classes.
pub const NUM_CLASSES: usize = 3;

/// Tolerance on the sum of a probability vector.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Ordinal slide/tile grade. The derived ordering is the severity order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    /// Non-neoplastic.
    #[serde(rename = "NNeo")]
    NonNeoplastic,
    /// Low-grade dysplasia.
    #[serde(rename = "LG")]
    LowGrade,
    /// High-grade dysplasia, including invasive carcinoma.
    #[serde(rename = "HG")]
    HighGrade,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::NonNeoplastic,
        ClassLabel::LowGrade,
        ClassLabel::HighGrade,
    ];

    /// 1-based ordinal value (NNeo = 1, LG = 2, HG = 3).
    pub fn ordinal(self) -> usize {
        self.index() + 1
    }

    /// 0-based position in probability vectors.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::NonNeoplastic => 0,
            ClassLabel::LowGrade => 1,
            ClassLabel::HighGrade => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn from_ordinal(ordinal: usize) -> Option<Self> {
        ordinal.checked_sub(1).and_then(Self::from_index)
    }

    pub fn code(self) -> &'static str {
        match self {
            ClassLabel::NonNeoplastic => "NNeo",
            ClassLabel::LowGrade => "LG",
            ClassLabel::HighGrade => "HG",
        }
    }

    /// Binary collapse used for "NNeo vs all" metrics.
    pub fn is_lesion(self) -> bool {
        self != ClassLabel::NonNeoplastic
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown class label `{0}` (expected NNeo, LG or HG)")]
pub struct ParseLabelError(pub String);

impl FromStr for ClassLabel {
    type Err = ParseLabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "NNeo" | "nneo" | "1" => Ok(ClassLabel::NonNeoplastic),
            "LG" | "lg" | "2" => Ok(ClassLabel::LowGrade),
            "HG" | "hg" | "3" => Ok(ClassLabel::HighGrade),
            other => Err(ParseLabelError(other.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid probability vector {values:?}: {reason}")]
pub struct InvalidSimplex {
    pub values: Vec<f64>,
    pub reason: &'static str,
}

/// A point on the K-class probability simplex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; NUM_CLASSES]", into = "[f64; NUM_CLASSES]")]
pub struct ClassProbs([f64; NUM_CLASSES]);

impl ClassProbs {
    pub fn new(p: [f64; NUM_CLASSES]) -> Result<Self, InvalidSimplex> {
        let fail = |reason| InvalidSimplex {
            values: p.to_vec(),
            reason,
        };
        if p.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite entry"));
        }
        if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(fail("entry outside [0, 1]"));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(fail("entries do not sum to 1"));
        }
        Ok(Self(p))
    }

    pub fn one_hot(label: ClassLabel) -> Self {
        let mut p = [0.0; NUM_CLASSES];
        p[label.index()] = 1.0;
        Self(p)
    }

    pub fn values(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    pub fn get(&self, label: ClassLabel) -> f64 {
        self.0[label.index()]
    }

    /// Most probable class; exact ties resolve to the more severe class.
    pub fn argmax(&self) -> ClassLabel {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if self.0[i] >= self.0[best] {
                best = i;
            }
        }
        ClassLabel::ALL[best]
    }
}

impl TryFrom<[f64; NUM_CLASSES]> for ClassProbs {
    type Error = InvalidSimplex;

    fn try_from(p: [f64; NUM_CLASSES]) -> Result<Self, Self::Error> {
        Self::new(p)
    }
}

impl From<ClassProbs> for [f64; NUM_CLASSES] {
    fn from(p: ClassProbs) -> Self {
        p.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordinal_order_matches_severity() {
        assert!(ClassLabel::NonNeoplastic < ClassLabel::LowGrade);
        assert!(ClassLabel::LowGrade < ClassLabel::HighGrade);
        for l in ClassLabel::ALL {
            assert_eq!(ClassLabel::from_ordinal(l.ordinal()), Some(l));
            assert_eq!(l.code().parse::<ClassLabel>().unwrap(), l);
        }
        assert!("banana".parse::<ClassLabel>().is_err());
    }

    #[test]
    fn simplex_validation() {
        assert!(ClassProbs::new([0.2, 0.5, 0.3]).is_ok());
        assert!(ClassProbs::new([0.2, 0.5, 0.4]).is_err());
        assert!(ClassProbs::new([-0.1, 0.6, 0.5]).is_err());
        assert!(ClassProbs::new([f64::NAN, 0.5, 0.5]).is_err());
        let json = serde_json::to_string(&ClassProbs::one_hot(ClassLabel::LowGrade)).unwrap();
        assert_eq!(json, "[0.0,1.0,0.0]");
        assert!(serde_json::from_str::<ClassProbs>("[0.5,0.5,0.5]").is_err());
    }

    #[test]
    fn argmax_ties_go_to_the_severe_side() {
        let p = ClassProbs::new([0.4, 0.4, 0.2]).unwrap();
        assert_eq!(p.argmax(), ClassLabel::LowGrade);
        let p = ClassProbs::new([0.1, 0.2, 0.7]).unwrap();
        assert_eq!(p.argmax(), ClassLabel::HighGrade);
    }
}
