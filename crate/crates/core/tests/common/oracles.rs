//! Brute-force reference implementations, written independently of the
//! library code they check.

#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;

/// Exhaustive Otsu: class weights and means as exact rationals, between-class
/// variance `w0 * w1 * (mu0 - mu1)^2`, first maximizer wins.
pub fn otsu_exhaustive(hist: &[u64; 256]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    let mut best: Option<(u8, BigRational)> = None;
    for t in 0..=255usize {
        let (c0, c1): (u64, u64) = (hist[..=t].iter().sum(), hist[t + 1..].iter().sum());
        if c0 == 0 || c1 == 0 {
            continue;
        }
        let moment = |range: std::ops::Range<usize>| -> BigInt {
            range
                .map(|i| BigInt::from(i as u64) * BigInt::from(hist[i]))
                .sum()
        };
        let mu0 = BigRational::new(moment(0..t + 1), BigInt::from(c0));
        let mu1 = BigRational::new(moment(t + 1..256), BigInt::from(c1));
        let w0 = BigRational::new(BigInt::from(c0), BigInt::from(total));
        let w1 = BigRational::new(BigInt::from(c1), BigInt::from(total));
        let d = &mu0 - &mu1;
        let var = w0 * w1 * &d * &d;
        if best.as_ref().is_none_or(|(_, b)| var > *b) {
            best = Some((t as u8, var));
        }
    }
    best.map(|(t, _)| t)
}

/// Top-k by repeated selection of the highest remaining score, lowest index
/// on ties.
pub fn topk_by_selection(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(scores.len()) {
        let mut pick: Option<usize> = None;
        for i in 0..scores.len() {
            if taken[i] {
                continue;
            }
            match pick {
                None => pick = Some(i),
                Some(p) if scores[i] > scores[p] => pick = Some(i),
                _ => {}
            }
        }
        let p = pick.expect("remaining element");
        taken[p] = true;
        out.push(p);
    }
    out
}

/// Weighted kappa through agreement weights `1 - (i-j)^2/(K-1)^2`:
/// `(p_o - p_e) / (1 - p_e)`.
pub fn qwk_confusion(preds: &[usize], labels: &[usize], k: usize) -> f64 {
    let n = preds.len() as f64;
    let mut conf = vec![vec![0.0f64; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        conf[l - 1][p - 1] += 1.0;
    }
    let row: Vec<f64> = conf.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..k).map(|j| conf.iter().map(|r| r[j]).sum()).collect();
    let denom = ((k - 1) * (k - 1)) as f64;
    let (mut po, mut pe) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let agree = 1.0 - ((i as f64 - j as f64).powi(2)) / denom;
            po += agree * conf[i][j] / n;
            pe += agree * row[i] * col[j] / (n * n);
        }
    }
    (po - pe) / (1.0 - pe)
}

/// Unweighted Cohen's kappa for two classes.
pub fn cohen_kappa(preds: &[usize], labels: &[usize]) -> f64 {
    let n = preds.len() as f64;
    let po = preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / n;
    let pe: f64 = (1..=2)
        .map(|c| {
            let a = preds.iter().filter(|&&p| p == c).count() as f64 / n;
            let b = labels.iter().filter(|&&l| l == c).count() as f64 / n;
            a * b
        })
        .sum();
    (po - pe) / (1.0 - pe)
}
