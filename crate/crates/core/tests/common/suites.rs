//! Randomized case suites. Each returns a one-line summary on success and
//! the first failing case otherwise.

#![allow(dead_code)]

use colomil_core::eval::qwk;
use colomil_core::label::{ClassLabel, ClassProbs};
use colomil_core::mil::{
    aggregate_labels, diagnose, infer_slide, sample_topk, severity_of, SeverityRanking, TileBank,
    TileSource,
};
use colomil_core::scorer::{ScorerError, TileScorer};
use colomil_core::tiler::TileRef;
use colomil_core::tissue::otsu_threshold;
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::{otsu_exhaustive, qwk_confusion, topk_by_selection};

pub type Outcome = Result<String, String>;

pub fn random_histogram(rng: &mut ChaCha8Rng) -> [u64; 256] {
    let mut h = [0u64; 256];
    match rng.gen_range(0..4) {
        // dense noise
        0 => h.iter_mut().for_each(|c| *c = rng.gen_range(0..1000)),
        // a handful of spikes
        1 => {
            for _ in 0..rng.gen_range(2..6) {
                h[rng.gen_range(0..256)] += rng.gen_range(1..5000);
            }
        }
        // two bumps, like background and tissue saturation
        2 => {
            let (a, b) = (rng.gen_range(0..60), rng.gen_range(80..256));
            for _ in 0..20_000 {
                let c: i64 = if rng.gen_bool(0.6) { a } else { b };
                let v = (c + rng.gen_range(-12..=12)).clamp(0, 255);
                h[v as usize] += 1;
            }
        }
        // sparse with large counts
        _ => {
            for _ in 0..rng.gen_range(2..40) {
                h[rng.gen_range(0..256)] = rng.gen_range(1..u32::MAX as u64);
            }
        }
    }
    if h.iter().filter(|&&c| c > 0).count() < 2 {
        h[0] += 1;
        h[255] += 1;
    }
    h
}

pub fn otsu_suite(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let h = random_histogram(&mut rng);
        let (got, want) = (otsu_threshold(&h).ok(), otsu_exhaustive(&h));
        if got != want {
            return Err(format!("histogram {case}: {got:?} vs oracle {want:?}"));
        }
    }
    Ok(format!("{cases} histograms match exactly"))
}

pub fn tile(n: usize) -> TileRef {
    TileRef {
        slide_id: "s".into(),
        index: n,
        origin_x: n as u32,
        origin_y: 0,
        size: 1,
    }
}

pub fn ranking_from_scores(scores: &[f64]) -> SeverityRanking {
    let p = ClassProbs::one_hot(ClassLabel::LowGrade);
    SeverityRanking::from_keys(
        "s",
        "v",
        scores.iter().enumerate().map(|(i, &s)| (tile(i), s, p)).collect(),
    )
}

pub fn topk_suite(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut with_ties = 0;
    for case in 0..cases {
        let n = rng.gen_range(1..120);
        // Coarse values force plenty of exact ties.
        let coarse = rng.gen_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    1.0 + rng.gen_range(0..5) as f64 * 0.5
                } else {
                    rng.gen_range(1.0..3.0)
                }
            })
            .collect();
        let m = rng.gen_range(1..150);
        let got: Vec<usize> = sample_topk(&ranking_from_scores(&scores), m)
            .map_err(|e| e.to_string())?
            .refs
            .iter()
            .map(|r| r.index)
            .collect();
        let want = topk_by_selection(&scores, m);
        if got != want {
            return Err(format!("vector {case}: {got:?} vs oracle {want:?}"));
        }
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        with_ties += usize::from(sorted.len() < scores.len());
    }
    Ok(format!("{cases} vectors match exactly ({with_ties} with ties)"))
}

pub fn qwk_suite(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let n = rng.gen_range(2..=200);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=3)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&l| if rng.gen_bool(0.6) { l } else { rng.gen_range(1..=3) })
            .collect();
        let a = qwk(&preds, &labels, 3).map_err(|e| e.to_string())?;
        let b = qwk_confusion(&preds, &labels, 3);
        if b.is_nan() {
            // Single shared class on both sides.
            if a != 1.0 {
                return Err(format!("vector {case}: degenerate agreement gave {a}"));
            }
            continue;
        }
        worst = worst.max((a - b).abs());
        if (a - b).abs() > 1e-9 {
            return Err(format!("vector {case}: {a} vs oracle {b}"));
        }
    }
    Ok(format!("{cases} vectors, max |diff| {worst:.1e}"))
}

pub fn random_simplex(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let raw: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    let s: f64 = raw.iter().sum::<f64>().max(1e-12);
    let p = [raw[0] / s, raw[1] / s, 0.0];
    [p[0], p[1], 1.0 - p[0] - p[1]]
}

pub fn severity_one_hot() -> Outcome {
    for l in ClassLabel::ALL {
        let s = severity_of(&ClassProbs::one_hot(l));
        if s != l.ordinal() as f64 {
            return Err(format!("one-hot {l} gave {s}"));
        }
    }
    Ok("one-hot NNeo/LG/HG give exactly 1/2/3".into())
}

/// Moving mass `eps` from class i to class j changes severity by
/// `eps * (j - i)`.
pub fn severity_mass_shift_suite(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let p = random_simplex(&mut rng);
        let i = rng.gen_range(0..3);
        let j = rng.gen_range(0..3);
        let eps = p[i] * rng.gen_range(0.0..=1.0);
        let mut q = p;
        q[i] -= eps;
        q[j] += eps;
        let (Ok(a), Ok(b)) = (ClassProbs::new(p), ClassProbs::new(q)) else {
            return Err(format!("case {case}: not a simplex"));
        };
        let diff = severity_of(&b) - severity_of(&a);
        let want = eps * (j as f64 - i as f64);
        let err = (diff - want).abs();
        worst = worst.max(err);
        if err > 1e-12 {
            return Err(format!("case {case}: shift {i}->{j} by {eps} changed severity by {diff}, want {want}"));
        }
    }
    Ok(format!("{cases} simplices, max error {worst:.1e}"))
}

/// Reads class probabilities straight from the tile's first pixel.
pub struct PixelScorer;

impl TileScorer for PixelScorer {
    fn version(&self) -> &str {
        "pixel"
    }

    fn score(&self, tile: &RgbImage) -> Result<ClassProbs, ScorerError> {
        let [r, g, b] = tile.get_pixel(0, 0).0.map(f64::from);
        let s = r + g + b;
        Ok(ClassProbs::new([r / s, g / s, b / s]).expect("positive pixel"))
    }
}

fn random_pixel(rng: &mut ChaCha8Rng) -> [u8; 3] {
    // Coarse channels produce exact severity ties across tiles.
    let coarse = rng.gen_bool(0.3);
    let mut c = || if coarse { rng.gen_range(0..4u8) * 60 } else { rng.gen_range(0..=255u8) };
    let mut px = [c(), c(), c()];
    if px == [0, 0, 0] {
        px[0] = 1;
    }
    px
}

struct Case {
    bank: TileBank,
    tiles: Vec<TileRef>,
}

fn random_case(rng: &mut ChaCha8Rng, n: usize) -> Case {
    let mut bank = TileBank::new();
    let tiles: Vec<TileRef> = (0..n).map(tile).collect();
    for t in &tiles {
        bank.insert(t, RgbImage::from_pixel(1, 1, Rgb(random_pixel(rng))));
    }
    Case { bank, tiles }
}

/// Permutation invariance, NNeo-append neutrality and monotone-rescaling
/// invariance of the slide diagnosis, `cases` randomized slides each.
pub fn max_rule_suite(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = |c: &Case, tiles: &[TileRef]| {
        infer_slide(&PixelScorer, &c.bank, "s", tiles, 5, 7).map_err(|e| e.to_string())
    };
    for case in 0..cases {
        let n = rng.gen_range(1..40);
        let mut c = random_case(&mut rng, n);
        let (base, ranking) = run(&c, &c.tiles)?;

        // Relabel tile indices in a random order: the most severe tile, and
        // so the diagnosis, is found wherever it sits.
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut bank = TileBank::new();
        let mut moved = Vec::with_capacity(n);
        for (new, &old) in perm.iter().enumerate() {
            let px = c.bank.load(&c.tiles[old]).expect("tile in bank").into_owned();
            let t = tile(new);
            bank.insert(&t, px);
            moved.push(t);
        }
        let shuffled = Case { bank, tiles: moved };
        let mut order = shuffled.tiles.clone();
        order.shuffle(&mut rng);
        let (p, _) = run(&shuffled, &order)?;
        if (p.predicted, p.confidence) != (base.predicted, base.confidence) {
            return Err(format!("permutation case {case}: {} became {}", base.predicted, p.predicted));
        }

        // Appending pure NNeo tiles changes nothing.
        let extra = rng.gen_range(1..10);
        for k in n..n + extra {
            let t = tile(k);
            c.bank.insert(&t, RgbImage::from_pixel(1, 1, Rgb([255, 0, 0])));
            c.tiles.push(t);
        }
        let (a, _) = run(&c, &c.tiles)?;
        if (a.predicted, a.confidence, &a.top_tiles[0].tile) != (base.predicted, base.confidence, &base.top_tiles[0].tile) {
            return Err(format!("NNeo-append case {case}: {} became {}", base.predicted, a.predicted));
        }

        // Any strictly increasing transform of severity keeps the argmax.
        let (scale, shift) = (rng.gen_range(0.05..20.0), rng.gen_range(-10.0..10.0));
        let keyed = ranking
            .entries
            .iter()
            .map(|e| (e.tile.clone(), (scale * e.expected_severity + shift).exp().ln_1p(), e.probs))
            .collect();
        let r = diagnose(&SeverityRanking::from_keys("s", "pixel", keyed), 5).map_err(|e| e.to_string())?;
        if (r.predicted, r.confidence) != (base.predicted, base.confidence) {
            return Err(format!("rescaling case {case}: {} became {}", base.predicted, r.predicted));
        }

        // The slide label of the tile-level argmaxes obeys the same rule.
        let labels: Vec<ClassLabel> = ranking.entries.iter().map(|e| e.probs.argmax()).collect();
        let mut shuffled_labels = labels.clone();
        shuffled_labels.shuffle(&mut rng);
        shuffled_labels.push(ClassLabel::NonNeoplastic);
        if aggregate_labels(&shuffled_labels).ok() != aggregate_labels(&labels).ok() {
            return Err(format!("label aggregation case {case}"));
        }
    }
    Ok(format!("{cases} cases x 3 relations, zero violations"))
}
