#![allow(dead_code)]

use colomil_core::label::ClassLabel;
use colomil_core::scorer::{loss_and_gradient, InputTensor, LabeledTile, ScorerConfig, ScorerModel};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest relative error between analytic and central-difference gradients
/// over `coords` randomly chosen parameters. Pairs whose magnitudes sum below
/// 1e-6 are compared against that floor, the finite-difference noise level.
pub fn gradient_check(cfg: ScorerConfig, coords: usize, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ScorerModel::new(cfg.clone(), &mut rng).unwrap();
    let side = cfg.input_size;
    let inputs: Vec<InputTensor> = (0..3)
        .map(|_| InputTensor {
            side,
            data: (0..3 * side * side).map(|_| rng.gen_range(0.0..1.0)).collect(),
        })
        .collect();
    let batch: Vec<LabeledTile<InputTensor>> = inputs
        .iter()
        .zip(ClassLabel::ALL)
        .map(|(t, l)| (t, l))
        .collect();
    let analytic = loss_and_gradient(&model, &batch, true).unwrap().grad;
    let loss_at = |params: Vec<f64>| {
        let m = ScorerModel::from_params(cfg.clone(), params).unwrap();
        loss_and_gradient(&m, &batch, true).unwrap().loss
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let picked = sample(&mut rng, model.num_params(), coords.min(model.num_params()));
    for i in picked.iter() {
        let mut plus = model.params().to_vec();
        plus[i] += h;
        let mut minus = model.params().to_vec();
        minus[i] -= h;
        let numeric = (loss_at(plus) - loss_at(minus)) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    (picked.len(), worst)
}
