use std::borrow::Cow;
use std::collections::BTreeMap;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::{diagnose, rank_tiles, sample_topk, MilError, SampledSet, SeverityRanking, TileSource};
use crate::eval::{accuracy, qwk_labels};
use crate::label::ClassLabel;
use crate::rng::substream;
use crate::scorer::{
    improves, run_epoch, train_supervised, Adam, EpochRecord, LabeledTile, ScorerModel,
    TrainConfig,
};
use crate::slide::Split;
use crate::tiler::TileRef;

/// Which slide sets are reduced to their Top-M tiles after the first weak
/// epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingScope {
    Train,
    TrainAndVal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilConfig {
    pub train: TrainConfig,
    /// Tiles kept per slide by Top-k sampling.
    pub m: usize,
    /// Most severe tiles per slide used as weak training samples.
    pub top_n: usize,
    pub scope: SamplingScope,
    /// Validate on sampled sets (when the scope includes validation) rather
    /// than on every tile.
    pub sample_validation: bool,
    /// Also rank every training tile at the start of each weak epoch, for
    /// retention analysis. Not counted in `tiles_scored`.
    pub record_full_rankings: bool,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            m: super::DEFAULT_SAMPLE_CAP,
            top_n: super::DEFAULT_TOP_N,
            scope: SamplingScope::TrainAndVal,
            sample_validation: true,
            record_full_rankings: false,
        }
    }
}

/// A slide as seen by the training schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct MilSlide {
    pub id: String,
    pub split: Split,
    pub label: Option<ClassLabel>,
    pub tiles: Vec<TileRef>,
}

pub struct MilDataset<'a, T: TileSource + ?Sized> {
    pub source: &'a T,
    pub slides: Vec<MilSlide>,
    /// Tile-level annotations from training slides.
    pub annotated_train: Vec<(TileRef, ClassLabel)>,
    /// Tile-level annotations from validation slides.
    pub annotated_val: Vec<(TileRef, ClassLabel)>,
}

/// One slide's candidates for a weak epoch.
#[derive(Clone, Copy, Debug)]
pub struct WeakSlide<'a> {
    pub slide_id: &'a str,
    pub label: ClassLabel,
    pub candidates: &'a [TileRef],
}

pub struct WeakEpochOutcome {
    pub record: EpochRecord,
    /// Rankings of the candidates under the model at the start of the epoch.
    pub rankings: Vec<SeverityRanking>,
    /// Indices of the tiles trained on, per slide.
    pub selected: BTreeMap<String, Vec<usize>>,
}

fn load_all<'s, T: TileSource + ?Sized>(
    source: &'s T,
    tiles: &[(TileRef, ClassLabel)],
) -> Result<Vec<(Cow<'s, RgbImage>, ClassLabel)>, MilError> {
    tiles
        .iter()
        .map(|(t, l)| Ok((source.load(t)?, *l)))
        .collect()
}

fn borrow<'a>(v: &'a [(Cow<'_, RgbImage>, ClassLabel)]) -> Vec<LabeledTile<'a, RgbImage>> {
    v.iter().map(|(img, l)| (img.as_ref(), *l)).collect()
}

/// One weakly supervised epoch: rank each slide's candidates with the
/// current model, label the `min(top_n, |candidates|)` most severe tiles with
/// the slide label, shuffle, and train on them.
#[allow(clippy::too_many_arguments)]
pub fn weak_epoch<T: TileSource + ?Sized, R: Rng>(
    model: &mut ScorerModel,
    opt: &mut Adam,
    slides: &[WeakSlide<'_>],
    source: &T,
    cfg: &TrainConfig,
    top_n: usize,
    epoch: usize,
    rng: &mut R,
) -> Result<WeakEpochOutcome, MilError> {
    if top_n == 0 {
        return Err(MilError::InvalidConfig("top_n must be at least 1".into()));
    }
    let mut rankings = Vec::with_capacity(slides.len());
    let mut samples = Vec::new();
    let mut selected = BTreeMap::new();
    let mut scored = 0;
    for s in slides {
        let r = rank_tiles(&*model, source, s.slide_id, s.candidates, cfg.batch_infer)?;
        scored += r.len();
        let top = r.top(top_n);
        selected.insert(
            s.slide_id.to_string(),
            top.iter().map(|e| e.tile.index).collect::<Vec<_>>(),
        );
        samples.extend(top.iter().map(|e| (e.tile.clone(), s.label)));
        rankings.push(r);
    }
    if samples.is_empty() {
        return Err(MilError::EmptyDataset);
    }
    samples.shuffle(rng);
    let pixels = load_all(source, &samples)?;
    let mut record = run_epoch(model, opt, &borrow(&pixels), cfg, "weak", epoch)?;
    record.tiles_scored = Some(scored);
    record.tiles_per_slide = Some(selected.iter().map(|(k, v)| (k.clone(), v.len())).collect());
    Ok(WeakEpochOutcome {
        record,
        rankings,
        selected,
    })
}

pub struct MixedOutcome {
    pub model: ScorerModel,
    pub log: Vec<EpochRecord>,
    /// Supervised epoch behind the phase-A model; 0 when phase A was skipped.
    pub supervised_epoch: usize,
    /// Weak epoch of the returned model; 0 means the phase-A model.
    pub selected_epoch: usize,
    /// Top-M sets fixed after the first weak epoch.
    pub sampled: Vec<SampledSet>,
    /// `full_rankings[e]`: every training tile ranked at the start of weak
    /// epoch `e + 1`. Empty unless requested.
    pub full_rankings: Vec<Vec<SeverityRanking>>,
    /// Tiles trained on in each weak epoch.
    pub selections: Vec<BTreeMap<String, Vec<usize>>>,
}

fn validate_slides<T: TileSource + ?Sized>(
    model: &ScorerModel,
    source: &T,
    slides: &[(&MilSlide, &[TileRef])],
    chunk: usize,
) -> Result<(f64, f64, usize), MilError> {
    let mut preds = Vec::with_capacity(slides.len());
    let mut labels = Vec::with_capacity(slides.len());
    let mut scored = 0;
    for (s, tiles) in slides {
        let r = rank_tiles(model, source, &s.id, tiles, chunk)?;
        scored += r.len();
        preds.push(diagnose(&r, 1)?.predicted);
        labels.push(s.label.expect("validation slides are labeled"));
    }
    let acc = accuracy(&preds, &labels).expect("non-empty, equal length");
    let qwk = qwk_labels(&preds, &labels).expect("non-empty, equal length");
    Ok((acc, qwk, scored))
}

/// Supervised pre-training on annotated tiles, then weak epochs on slide
/// labels.
///
/// The first weak epoch ranks every training tile once; that single pass
/// yields both the Top-M sampled sets and the first epoch's training tiles.
/// Later epochs rank only within the sampled sets. Validation slides are
/// diagnosed after every weak epoch and the returned model is the epoch with
/// the best validation QWK, then accuracy.
pub fn run_mixed_supervision<T: TileSource + ?Sized>(
    model: ScorerModel,
    data: &MilDataset<'_, T>,
    cfg: &MilConfig,
) -> Result<MixedOutcome, MilError> {
    if cfg.m == 0 || cfg.top_n == 0 {
        return Err(MilError::InvalidConfig("M and top_n must be at least 1".into()));
    }
    let usable = |split: Split| -> Vec<&MilSlide> {
        data.slides
            .iter()
            .filter(|s| s.split == split)
            .filter(|s| {
                let ok = s.label.is_some() && !s.tiles.is_empty();
                if !ok {
                    warn!(slide = %s.id, "skipped: no label or no tissue tiles");
                }
                ok
            })
            .collect()
    };
    let train_slides = usable(Split::Train);
    let val_slides = usable(Split::Val);
    if data.annotated_train.is_empty() && train_slides.is_empty() {
        return Err(MilError::EmptyDataset);
    }

    let mut log = Vec::new();
    let mut model = model;
    let mut supervised_epoch = 0;
    if data.annotated_train.is_empty() {
        warn!("no annotated tiles; skipping supervised pre-training");
    } else {
        let train_px = load_all(data.source, &data.annotated_train)?;
        let val_px = load_all(data.source, &data.annotated_val)?;
        let out = train_supervised(model, &borrow(&train_px), &borrow(&val_px), &cfg.train)?;
        model = out.model;
        log.extend(out.log);
        supervised_epoch = out.selected_epoch;
    }

    let mut outcome = MixedOutcome {
        model: model.clone(),
        log: Vec::new(),
        supervised_epoch,
        selected_epoch: 0,
        sampled: Vec::new(),
        full_rankings: Vec::new(),
        selections: Vec::new(),
    };
    if cfg.train.epochs_weak == 0 || train_slides.is_empty() {
        if train_slides.is_empty() {
            warn!("no labeled training slides; skipping weak supervision");
        }
        outcome.log = log;
        return Ok(outcome);
    }

    let chunk = cfg.train.batch_infer;
    let sample_val = cfg.sample_validation && cfg.scope == SamplingScope::TrainAndVal;
    let mut rng = substream(cfg.train.seed, "shuffle/weak");
    let mut opt = Adam::new(model.num_params());
    let mut train_sets: Vec<Vec<TileRef>> = train_slides.iter().map(|s| s.tiles.clone()).collect();
    let mut val_sets: Vec<Vec<TileRef>> = val_slides.iter().map(|s| s.tiles.clone()).collect();
    let mut best: Option<(f64, f64)> = None;

    for epoch in 1..=cfg.train.epochs_weak {
        let mut val_sampling_scored = 0;
        if epoch == 1 && sample_val {
            for (s, set) in val_slides.iter().zip(val_sets.iter_mut()) {
                let r = rank_tiles(&model, data.source, &s.id, set, chunk)?;
                val_sampling_scored += r.len();
                let sampled = sample_topk(&r, cfg.m)?;
                *set = sampled.refs.clone();
                outcome.sampled.push(sampled);
            }
        }
        if cfg.record_full_rankings && epoch > 1 {
            let full = train_slides
                .iter()
                .map(|s| rank_tiles(&model, data.source, &s.id, &s.tiles, chunk))
                .collect::<Result<Vec<_>, _>>()?;
            outcome.full_rankings.push(full);
        }
        let weak_slides: Vec<WeakSlide> = train_slides
            .iter()
            .zip(&train_sets)
            .map(|(s, set)| WeakSlide {
                slide_id: &s.id,
                label: s.label.expect("filtered to labeled slides"),
                candidates: set,
            })
            .collect();
        let w = weak_epoch(
            &mut model,
            &mut opt,
            &weak_slides,
            data.source,
            &cfg.train,
            cfg.top_n,
            epoch,
            &mut rng,
        )?;
        if epoch == 1 {
            for (r, set) in w.rankings.iter().zip(train_sets.iter_mut()) {
                let sampled = sample_topk(r, cfg.m)?;
                *set = sampled.refs.clone();
                outcome.sampled.push(sampled);
            }
            if cfg.record_full_rankings {
                outcome.full_rankings.push(w.rankings);
            }
        }
        info!(epoch, loss = w.record.loss, scored = w.record.tiles_scored, "weak epoch");
        log.push(w.record);
        outcome.selections.push(w.selected);

        if val_slides.is_empty() {
            outcome.model = model.clone();
            outcome.selected_epoch = epoch;
            continue;
        }
        let pairs: Vec<(&MilSlide, &[TileRef])> = val_slides
            .iter()
            .copied()
            .zip(val_sets.iter().map(Vec::as_slice))
            .collect();
        let (acc, qwk, scored) = validate_slides(&model, data.source, &pairs, chunk)?;
        let mut rec = EpochRecord::new("weak", epoch, "val");
        rec.accuracy = Some(acc);
        rec.qwk = Some(qwk);
        rec.tiles_scored = Some(scored + val_sampling_scored);
        log.push(rec);
        if improves((qwk, acc), best) {
            best = Some((qwk, acc));
            outcome.model = model.clone();
            outcome.selected_epoch = epoch;
        }
    }
    info!(epoch = outcome.selected_epoch, "weak checkpoint selected");
    outcome.log = log;
    Ok(outcome)
}
