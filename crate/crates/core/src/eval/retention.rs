//! Fraction of relevant tiles a Top-k cap would discard.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub const DEFAULT_KS: [usize; 5] = [50, 75, 100, 150, 200];

/// One slide's ranking at one epoch: tile indices from most to least severe,
/// and the indices deemed relevant.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedSlide {
    pub ranked: Vec<usize>,
    pub relevant: BTreeSet<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionPoint {
    pub k: usize,
    pub epoch: usize,
    pub lost: usize,
    pub relevant: usize,
    /// `lost / relevant`, pooled over slides; 0 when nothing is relevant.
    pub lost_fraction: f64,
}

/// `epochs[e]` holds the slide rankings of epoch `e + 1`. A relevant tile is
/// lost at cap `k` when its 0-based rank position is `>= k`.
pub fn retention_curve(epochs: &[Vec<RankedSlide>], ks: &[usize]) -> Vec<RetentionPoint> {
    let mut out = Vec::with_capacity(epochs.len() * ks.len());
    for (e, slides) in epochs.iter().enumerate() {
        for &k in ks {
            let (mut lost, mut relevant) = (0, 0);
            for s in slides {
                relevant += s.relevant.len();
                lost += s
                    .ranked
                    .iter()
                    .skip(k)
                    .filter(|i| s.relevant.contains(i))
                    .count();
            }
            out.push(RetentionPoint {
                k,
                epoch: e + 1,
                lost,
                relevant,
                lost_fraction: if relevant == 0 {
                    0.0
                } else {
                    lost as f64 / relevant as f64
                },
            });
        }
    }
    out
}
