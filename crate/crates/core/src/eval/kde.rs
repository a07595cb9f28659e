//! Density of prediction confidences, split by correct and incorrect.

use serde::{Deserialize, Serialize};

use super::MetricError;

pub const GRID_POINTS: usize = 1001;
/// Lower bound on the bandwidth so point masses stay resolvable on the grid.
pub const MIN_BANDWIDTH: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub n: usize,
    pub mean: f64,
    pub bandwidth: f64,
    pub density: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeReport {
    /// Evaluation points, evenly spaced over [0, 1].
    pub grid: Vec<f64>,
    /// Absent when the group has fewer than two points.
    pub correct: Option<DensityCurve>,
    pub incorrect: Option<DensityCurve>,
    pub mean_correct: Option<f64>,
    pub mean_incorrect: Option<f64>,
    /// `mean_correct - mean_incorrect` when both groups are non-empty.
    pub mean_gap: Option<f64>,
}

pub fn grid() -> Vec<f64> {
    (0..GRID_POINTS)
        .map(|i| i as f64 / (GRID_POINTS - 1) as f64)
        .collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`, ignoring a zero
/// spread measure when the other is positive, floored at [`MIN_BANDWIDTH`].
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let sd = var.sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = (quantile(&sorted, 0.75) - quantile(&sorted, 0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => 0.0,
    };
    (0.9 * spread * n.powf(-0.2)).max(MIN_BANDWIDTH)
}

/// Gaussian KDE on [0, 1] with reflection at both boundaries.
pub fn density(values: &[f64], bandwidth: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let k = |d: f64| (-0.5 * (d / bandwidth).powi(2)).exp();
    grid.iter()
        .map(|&x| {
            norm * values
                .iter()
                .map(|&v| k(x - v) + k(x + v) + k(x - (2.0 - v)))
                .sum::<f64>()
        })
        .collect()
}

fn curve(values: &[f64], grid: &[f64]) -> Option<DensityCurve> {
    if values.len() < 2 {
        return None;
    }
    let bw = silverman_bandwidth(values);
    Some(DensityCurve {
        n: values.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        bandwidth: bw,
        density: density(values, bw, grid),
    })
}

pub fn confidence_kde(confidences: &[f64], correct: &[bool]) -> Result<KdeReport, MetricError> {
    if confidences.len() != correct.len() {
        return Err(MetricError::LengthMismatch {
            preds: confidences.len(),
            labels: correct.len(),
        });
    }
    if confidences.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let (mut good, mut bad) = (Vec::new(), Vec::new());
    for (&c, &ok) in confidences.iter().zip(correct) {
        assert!((0.0..=1.0).contains(&c), "confidence {c} outside [0, 1]");
        if ok {
            good.push(c);
        } else {
            bad.push(c);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let g = grid();
    let (mc, mi) = (mean(&good), mean(&bad));
    Ok(KdeReport {
        correct: curve(&good, &g),
        incorrect: curve(&bad, &g),
        grid: g,
        mean_correct: mc,
        mean_incorrect: mi,
        mean_gap: mc.zip(mi).map(|(a, b)| a - b),
    })
}

/// Trapezoidal integral of `ys` over `xs`.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_at_one() {
        let r = confidence_kde(&[1.0; 10], &[true; 10]).unwrap();
        assert!(r.incorrect.is_none());
        assert_eq!(r.mean_correct, Some(1.0));
        assert_eq!(r.mean_gap, None);
        let c = r.correct.unwrap();
        assert_eq!(c.bandwidth, MIN_BANDWIDTH);
        let peak = c
            .density
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, GRID_POINTS - 1);
        assert!((trapezoid(&r.grid, &c.density) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn single_point_group_is_omitted() {
        let r = confidence_kde(&[0.9, 0.8, 0.4], &[true, true, false]).unwrap();
        assert!(r.correct.is_some());
        assert!(r.incorrect.is_none());
        assert_eq!(r.mean_incorrect, Some(0.4));
        assert!((r.mean_gap.unwrap() - 0.45).abs() < 1e-12);
    }

    #[test]
    fn densities_integrate_to_one() {
        let vals: Vec<f64> = (0..50).map(|i| (i as f64 * 0.618).fract()).collect();
        let r = confidence_kde(&vals, &vec![true; 50]).unwrap();
        let c = r.correct.unwrap();
        assert!(c.density.iter().all(|&d| d >= 0.0));
        assert!((trapezoid(&r.grid, &c.density) - 1.0).abs() < 1e-3);
    }
}
