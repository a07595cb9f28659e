use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use super::{net, Adam, ScorerError, ScorerModel, TileInput};
use crate::eval::{accuracy, qwk_labels};
use crate::label::ClassLabel;
use crate::rng::substream;

/// Optimizer and schedule settings shared by both training phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_train: usize,
    pub batch_infer: usize,
    pub epochs_full: usize,
    pub epochs_weak: usize,
    pub seed: u64,
    /// Fixed-order gradient reduction; parallel reduction otherwise.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 6e-6,
            weight_decay: 3e-4,
            batch_train: 32,
            batch_infer: 256,
            epochs_full: 50,
            epochs_weak: 50,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ScorerError> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite()
            && self.batch_train > 0
            && self.batch_infer > 0;
        if ok {
            Ok(())
        } else {
            Err(ScorerError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// A training sample: pixels and the class used as target.
pub type LabeledTile<'a, I> = (&'a I, ClassLabel);

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub qwk: Option<f64>,
    /// Forward passes spent on ranking in this epoch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tiles_scored: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tiles_trained: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tiles_per_slide: Option<BTreeMap<String, usize>>,
}

impl EpochRecord {
    pub fn new(phase: &str, epoch: usize, split: &str) -> Self {
        Self {
            phase: phase.into(),
            epoch,
            split: split.into(),
            loss: None,
            accuracy: None,
            qwk: None,
            tiles_scored: None,
            tiles_trained: None,
            tiles_per_slide: None,
        }
    }
}

pub struct BatchGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
}

/// Mean cross-entropy over the batch and its gradient.
pub fn loss_and_gradient<I: TileInput>(
    model: &ScorerModel,
    batch: &[LabeledTile<'_, I>],
    deterministic: bool,
) -> Result<BatchGradient, ScorerError> {
    if batch.is_empty() {
        return Err(ScorerError::EmptyDataset);
    }
    let scale = 1.0 / batch.len() as f64;
    let n = model.params.len();
    let per_sample = |(tile, label): &LabeledTile<'_, I>| -> Result<(f64, Vec<f64>, Vec<f64>), ScorerError> {
        let fwd = model.forward(*tile)?;
        let loss = net::cross_entropy(&fwd.logits, label.index());
        let mut g = vec![0.0; n];
        net::backward(&model.layout, &model.params, &fwd, label.index(), scale, &mut g);
        Ok((loss, g, fwd.probs))
    };
    let results: Vec<_> = batch
        .par_iter()
        .map(per_sample)
        .collect::<Result<_, _>>()?;
    let mut probs = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    let grad = if deterministic {
        let mut grad = vec![0.0; n];
        for (l, g, p) in results {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
            probs.push(p);
        }
        grad
    } else {
        let mut grads = Vec::with_capacity(results.len());
        for (l, g, p) in results {
            loss += l;
            grads.push(g);
            probs.push(p);
        }
        grads
            .into_par_iter()
            .reduce_with(|mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            })
            .unwrap_or_else(|| vec![0.0; n])
    };
    Ok(BatchGradient {
        loss: loss * scale,
        grad,
        probs,
    })
}

/// One Adam step on `batch`. Returns the pre-update mean loss and the
/// pre-update probabilities. Parameters are untouched when the loss or
/// gradient is not finite.
pub fn train_step<I: TileInput>(
    model: &mut ScorerModel,
    opt: &mut Adam,
    batch: &[LabeledTile<'_, I>],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f64>>), ScorerError> {
    if batch.len() > cfg.batch_train {
        return Err(ScorerError::BatchTooLarge {
            got: batch.len(),
            max: cfg.batch_train,
        });
    }
    let bg = loss_and_gradient(model, batch, cfg.deterministic)?;
    if !bg.loss.is_finite() || bg.grad.iter().any(|g| !g.is_finite()) {
        return Err(ScorerError::NonFiniteLoss(bg.loss));
    }
    model.update_params(|p| opt.step(p, &bg.grad, cfg.lr, cfg.weight_decay));
    Ok((bg.loss, bg.probs))
}

/// Loss and agreement of a model on labeled tiles, without training.
#[derive(Clone, Debug, PartialEq)]
pub struct TileEvaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub qwk: f64,
    pub predictions: Vec<ClassLabel>,
}

pub fn evaluate_tiles<I: TileInput>(
    model: &ScorerModel,
    tiles: &[LabeledTile<'_, I>],
) -> Result<TileEvaluation, ScorerError> {
    if tiles.is_empty() {
        return Err(ScorerError::EmptyDataset);
    }
    let out: Vec<(f64, ClassLabel)> = tiles
        .par_iter()
        .map(|(tile, label)| {
            let fwd = model.forward(*tile)?;
            Ok((
                net::cross_entropy(&fwd.logits, label.index()),
                argmax_label(&fwd.probs),
            ))
        })
        .collect::<Result<_, ScorerError>>()?;
    let loss = out.iter().map(|(l, _)| l).sum::<f64>() / out.len() as f64;
    let predictions: Vec<ClassLabel> = out.into_iter().map(|(_, p)| p).collect();
    let labels: Vec<ClassLabel> = tiles.iter().map(|(_, l)| *l).collect();
    Ok(TileEvaluation {
        loss,
        accuracy: accuracy(&predictions, &labels).expect("lengths match"),
        qwk: qwk_labels(&predictions, &labels).expect("lengths match"),
        predictions,
    })
}

/// Most probable class; ties go to the more severe class.
pub(crate) fn argmax_label(p: &[f64]) -> ClassLabel {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v >= p[best] {
            best = i;
        }
    }
    ClassLabel::from_index(best).expect("class index in range")
}

/// `(qwk, accuracy)` lexicographic improvement; equal keys keep the earlier.
pub(crate) fn improves(candidate: (f64, f64), best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((bq, ba)) => candidate.0 > bq || (candidate.0 == bq && candidate.1 > ba),
    }
}

/// Runs `batches` of `(tile, label)` through `train_step` in the given order
/// and returns the train-split log record.
pub(crate) fn run_epoch<I: TileInput>(
    model: &mut ScorerModel,
    opt: &mut Adam,
    samples: &[LabeledTile<'_, I>],
    cfg: &TrainConfig,
    phase: &str,
    epoch: usize,
) -> Result<EpochRecord, ScorerError> {
    let mut loss_sum = 0.0;
    let mut preds = Vec::with_capacity(samples.len());
    for batch in samples.chunks(cfg.batch_train) {
        let (loss, probs) = train_step(model, opt, batch, cfg)?;
        loss_sum += loss * batch.len() as f64;
        preds.extend(probs.iter().map(|p| argmax_label(p)));
    }
    let labels: Vec<ClassLabel> = samples.iter().map(|(_, l)| *l).collect();
    let mut rec = EpochRecord::new(phase, epoch, "train");
    rec.loss = Some(loss_sum / samples.len() as f64);
    rec.accuracy = accuracy(&preds, &labels).ok();
    rec.qwk = qwk_labels(&preds, &labels).ok();
    rec.tiles_trained = Some(samples.len());
    Ok(rec)
}

pub struct SupervisedOutcome {
    pub model: ScorerModel,
    pub log: Vec<EpochRecord>,
    /// Epoch of the returned checkpoint; 0 when no epoch ran.
    pub selected_epoch: usize,
}

/// Supervised training on annotated tiles.
///
/// Each epoch visits every tile once in a seeded shuffled order. With a
/// validation set, the returned checkpoint is the epoch with the best
/// validation QWK, then accuracy, then the earliest; otherwise the last epoch.
pub fn train_supervised<I: TileInput>(
    model: ScorerModel,
    annotated: &[LabeledTile<'_, I>],
    validation: &[LabeledTile<'_, I>],
    cfg: &TrainConfig,
) -> Result<SupervisedOutcome, ScorerError> {
    if annotated.is_empty() {
        return Err(ScorerError::EmptyDataset);
    }
    cfg.validate()?;
    let mut log = Vec::new();
    if cfg.epochs_full == 0 {
        return Ok(SupervisedOutcome {
            model,
            log,
            selected_epoch: 0,
        });
    }
    let mut rng = substream(cfg.seed, "shuffle/supervised");
    let mut opt = Adam::new(model.num_params());
    let mut model = model;
    let mut best: Option<(f64, f64)> = None;
    let mut selected = (model.clone(), 0);
    let mut order: Vec<usize> = (0..annotated.len()).collect();
    for epoch in 1..=cfg.epochs_full {
        order.shuffle(&mut rng);
        let samples: Vec<_> = order.iter().map(|&i| annotated[i]).collect();
        let rec = run_epoch(&mut model, &mut opt, &samples, cfg, "supervised", epoch)?;
        debug!(epoch, loss = rec.loss, "supervised epoch");
        log.push(rec);
        if validation.is_empty() {
            selected = (model.clone(), epoch);
            continue;
        }
        let ev = evaluate_tiles(&model, validation)?;
        let mut rec = EpochRecord::new("supervised", epoch, "val");
        rec.loss = Some(ev.loss);
        rec.accuracy = Some(ev.accuracy);
        rec.qwk = Some(ev.qwk);
        log.push(rec);
        if improves((ev.qwk, ev.accuracy), best) {
            best = Some((ev.qwk, ev.accuracy));
            selected = (model.clone(), epoch);
        }
    }
    info!(epoch = selected.1, "supervised checkpoint selected");
    Ok(SupervisedOutcome {
        model: selected.0,
        log,
        selected_epoch: selected.1,
    })
}
