//! The commands behind the CLI, callable as a library.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use colomil_core::eval::{
    accuracy, binary_accuracy, confidence_interval, confidence_kde, qwk_labels, retention_curve,
    sensitivity, KdeReport, MetricError, MetricReport, RankedSlide, RetentionPoint, Z_95,
};
use colomil_core::label::ClassLabel;
use colomil_core::mil::{
    infer_slide, load_rankings, reduction_report, rankings_to_jsonl, run_mixed_supervision,
    DiagnosisResult, MilDataset, MilSlide, ReductionReport, SampledSet, SlideTileSource,
    TileBank, TileSource,
};
use colomil_core::rng::substream;
use colomil_core::scorer::{load_model, save_model, EpochRecord, ScorerModel, TileScorer};
use colomil_core::slide::{DatasetManifest, ManifestEntry, Slide, Split, TileAnnotation};
use colomil_core::tiler::{tile_grid, TileRef, TileSet};
use colomil_core::tissue::{segment_tissue, TissueMask};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::workdir::{read_jsonl, to_jsonl, write_json, write_text, Workdir};

/// Tiles are cached in memory for training while they fit this budget.
const TILE_CACHE_BYTES: u64 = 4 << 30;

fn workdir(cfg: &RunConfig) -> Workdir {
    Workdir::new(&cfg.workdir)
}

pub fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest, CliError> {
    if !cfg.manifest.exists() {
        return Err(CliError::MissingInput(format!(
            "manifest {} does not exist",
            cfg.manifest.display()
        )));
    }
    Ok(DatasetManifest::load(&cfg.manifest)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub slide_id: String,
    pub otsu_threshold: Option<u8>,
    pub mask_width: u32,
    pub mask_height: u32,
    pub tissue_cells: usize,
}

/// Segments every slide in the manifest into `masks/`.
pub fn segment(cfg: &RunConfig) -> Result<Vec<SegmentSummary>, CliError> {
    let manifest = load_manifest(cfg)?;
    let wd = workdir(cfg);
    let dir = wd.masks();
    wd.ensure(&dir)?;
    let out = manifest
        .entries
        .par_iter()
        .map(|e| {
            let slide = Slide::open_entry(e)?;
            let mask = segment_tissue(&slide, cfg.mask_factor)?;
            if mask.is_degenerate() {
                warn!(slide = %e.id, "no saturation contrast; mask is empty");
            }
            mask.save(&dir, &e.id)?;
            Ok(SegmentSummary {
                slide_id: e.id.clone(),
                otsu_threshold: mask.otsu_threshold,
                mask_width: mask.width,
                mask_height: mask.height,
                tissue_cells: mask.tissue_count(),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    write_json(&wd.reports().join("segment.json"), &out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileReport {
    pub tile_size: u32,
    pub tissue_threshold: f64,
    pub counts: BTreeMap<String, usize>,
    /// Tile reduction over training slides under Top-M sampling.
    pub reduction: ReductionReport,
}

/// Tiles every slide from its stored mask into `tiles/`.
pub fn tile(cfg: &RunConfig) -> Result<TileReport, CliError> {
    let manifest = load_manifest(cfg)?;
    let wd = workdir(cfg);
    wd.ensure(&wd.tiles())?;
    let sets = manifest
        .entries
        .par_iter()
        .map(|e| {
            let slide = Slide::open_entry(e)?;
            let mask = load_mask(&wd, &e.id)?;
            let set = tile_grid(slide.record(), &mask, cfg.tile_size, cfg.tissue_threshold)?;
            set.save(&wd.tile_file(&e.id))?;
            Ok((e, set.len()))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let counts: BTreeMap<String, usize> = sets.iter().map(|(e, n)| (e.id.clone(), *n)).collect();
    let train: Vec<u64> = sets
        .iter()
        .filter(|(e, _)| e.split == Split::Train)
        .map(|(_, n)| *n as u64)
        .collect();
    let report = TileReport {
        tile_size: cfg.tile_size,
        tissue_threshold: cfg.tissue_threshold,
        counts,
        reduction: reduction_report(&train, Some(cfg.m as u64)),
    };
    write_json(&wd.reports().join("tiles.json"), &report)?;
    Ok(report)
}

fn load_mask(wd: &Workdir, id: &str) -> Result<TissueMask, CliError> {
    let dir = wd.masks();
    if !dir.join(format!("{id}.mask.png")).exists() {
        return Err(CliError::MissingInput(format!(
            "no mask for slide {id}; run `colomil segment` first"
        )));
    }
    Ok(TissueMask::load(&dir, id)?)
}

pub fn load_tiles(wd: &Workdir, id: &str) -> Result<TileSet, CliError> {
    let path = wd.tile_file(id);
    if !path.exists() {
        return Err(CliError::MissingInput(format!(
            "no tiles for slide {id}; run `colomil tile` first"
        )));
    }
    Ok(TileSet::load(&path, id)?)
}

/// Maps annotation footprints onto tissue tiles. Annotations without a
/// matching tile are dropped and counted.
fn annotated_tiles(
    entry: &ManifestEntry,
    tiles: &TileSet,
) -> Result<(Vec<(TileRef, ClassLabel)>, usize), CliError> {
    let Some(path) = &entry.annotations else {
        return Ok((Vec::new(), 0));
    };
    let by_origin: HashMap<(u32, u32, u32), &TileRef> = tiles
        .refs
        .iter()
        .map(|t| ((t.origin_x, t.origin_y, t.size), t))
        .collect();
    let mut out = Vec::new();
    let mut dropped = 0;
    for a in TileAnnotation::load_all(path)? {
        match by_origin.get(&(a.x, a.y, a.size)) {
            Some(t) => out.push(((*t).clone(), a.label)),
            None => dropped += 1,
        }
    }
    Ok((out, dropped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub epoch: usize,
    pub slide_id: String,
    pub tiles: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model_version: String,
    pub parameters: usize,
    pub supervised_epoch: usize,
    pub selected_epoch: usize,
    pub annotated_train: usize,
    pub annotated_val: usize,
    pub dropped_annotations: usize,
    pub reduction: ReductionReport,
    pub log: Vec<EpochRecord>,
}

/// Mixed-supervision training on the manifest's train and val slides.
///
/// Writes the selected checkpoint, `reports/train_log.jsonl`,
/// `reports/train.json`, the sampled sets, the per-epoch selections and,
/// when enabled, the full per-epoch training rankings.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let manifest = load_manifest(cfg)?;
    let wd = workdir(cfg);
    let entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.split != Split::Test)
        .collect();
    let mut slides = Vec::new();
    let mut annotated_train = Vec::new();
    let mut annotated_val = Vec::new();
    let mut dropped = 0;
    for e in &entries {
        let tiles = load_tiles(&wd, &e.id)?;
        let (ann, d) = annotated_tiles(e, &tiles)?;
        if d > 0 {
            warn!(slide = %e.id, dropped = d, "annotations outside tissue tiles");
        }
        dropped += d;
        match e.split {
            Split::Train => annotated_train.extend(ann),
            _ => annotated_val.extend(ann),
        }
        slides.push(MilSlide {
            id: e.id.clone(),
            split: e.split,
            label: e.label,
            tiles: tiles.refs,
        });
    }

    let side = cfg.scorer.input_size;
    let total: u64 = slides.iter().map(|s| s.tiles.len() as u64).sum();
    let opened = entries
        .par_iter()
        .map(|e| Slide::open_entry(e))
        .collect::<Result<Vec<_>, _>>()?;
    let bank;
    let lazy;
    let source: &dyn TileSource = if total * (side as u64).pow(2) * 3 <= TILE_CACHE_BYTES {
        let mut b = TileBank::new();
        for (slide, s) in opened.iter().zip(&slides) {
            b.fill_from(slide, &s.tiles, side)?;
        }
        info!(tiles = b.len(), "tiles cached in memory");
        bank = b;
        &bank
    } else {
        lazy = SlideTileSource::new(&opened, side);
        &lazy
    };

    let data = MilDataset {
        source,
        slides,
        annotated_train,
        annotated_val,
    };
    let mut rng = substream(cfg.train.seed, "init");
    let model = ScorerModel::new(cfg.scorer.clone(), &mut rng)?;
    let outcome = run_mixed_supervision(model, &data, &cfg.mil())?;

    let ckpt = cfg.checkpoint_path();
    save_model(&outcome.model, &ckpt)?;
    write_text(&wd.reports().join("train_log.jsonl"), &to_jsonl(&outcome.log))?;
    let rankings = wd.rankings();
    write_text(&rankings.join("sampled.jsonl"), &to_jsonl(&outcome.sampled))?;
    let selections: Vec<SelectionRecord> = outcome
        .selections
        .iter()
        .enumerate()
        .flat_map(|(i, sel)| {
            sel.iter().map(move |(id, tiles)| SelectionRecord {
                epoch: i + 1,
                slide_id: id.clone(),
                tiles: tiles.clone(),
            })
        })
        .collect();
    write_text(&rankings.join("selections.jsonl"), &to_jsonl(&selections))?;
    let full_dir = rankings.join("full");
    if full_dir.exists() {
        fs::remove_dir_all(&full_dir).map_err(|e| CliError::io(&full_dir, e))?;
    }
    for (i, r) in outcome.full_rankings.iter().enumerate() {
        write_text(
            &full_dir.join(format!("epoch_{:03}.jsonl", i + 1)),
            &rankings_to_jsonl(r),
        )?;
    }

    let train_counts: Vec<u64> = data
        .slides
        .iter()
        .filter(|s| s.split == Split::Train && s.label.is_some() && !s.tiles.is_empty())
        .map(|s| s.tiles.len() as u64)
        .collect();
    let summary = TrainSummary {
        model_version: outcome.model.version().to_string(),
        parameters: outcome.model.num_params(),
        supervised_epoch: outcome.supervised_epoch,
        selected_epoch: outcome.selected_epoch,
        annotated_train: data.annotated_train.len(),
        annotated_val: data.annotated_val.len(),
        dropped_annotations: dropped,
        reduction: reduction_report(&train_counts, Some(cfg.m as u64)),
        log: outcome.log,
    };
    write_json(&wd.reports().join("train.json"), &summary)?;
    Ok(summary)
}

/// Which manifest slides a command acts on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlideFilter {
    pub split: Option<Split>,
    pub ids: Vec<String>,
}

impl SlideFilter {
    pub fn matches(&self, e: &ManifestEntry) -> bool {
        self.split.is_none_or(|s| s == e.split) && (self.ids.is_empty() || self.ids.contains(&e.id))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub slide_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOutcome {
    pub model_version: String,
    pub results: Vec<DiagnosisResult>,
    pub skipped: Vec<Skipped>,
}

/// Diagnoses the selected slides with a checkpoint. Writes
/// `results/diagnoses.jsonl` and one full ranking per slide under
/// `results/rankings/`.
pub fn infer(cfg: &RunConfig, filter: &SlideFilter) -> Result<InferOutcome, CliError> {
    let manifest = load_manifest(cfg)?;
    let model = load_model(&cfg.checkpoint_path())?;
    let wd = workdir(cfg);
    let side = model.config().input_size;
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    let ranking_dir = wd.results().join("rankings");
    for e in manifest.entries.iter().filter(|e| filter.matches(e)) {
        let tiles = load_tiles(&wd, &e.id)?;
        if tiles.is_empty() {
            warn!(slide = %e.id, "no tissue tiles; skipped");
            skipped.push(Skipped {
                slide_id: e.id.clone(),
                reason: "no tissue tiles".into(),
            });
            continue;
        }
        let slide = Slide::open_entry(e)?;
        let source = SlideTileSource::new([&slide], side);
        let (result, ranking) = infer_slide(
            &model,
            &source,
            &e.id,
            &tiles.refs,
            cfg.top_n,
            cfg.train.batch_infer,
        )?;
        write_text(
            &ranking_dir.join(format!("{}.jsonl", e.id)),
            &rankings_to_jsonl(std::slice::from_ref(&ranking)),
        )?;
        results.push(result);
    }
    write_text(&wd.diagnoses(), &to_jsonl(&results))?;
    let outcome = InferOutcome {
        model_version: model.version().to_string(),
        results,
        skipped,
    };
    write_json(
        &wd.reports().join("infer.json"),
        &serde_json::json!({
            "model_version": outcome.model_version,
            "diagnosed": outcome.results.len(),
            "skipped": outcome.skipped,
        }),
    )?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Option<Split>,
    pub n: usize,
    pub accuracy: MetricReport,
    pub binary_accuracy: MetricReport,
    /// Absent when no evaluated slide is a lesion.
    pub sensitivity: Option<MetricReport>,
    pub qwk: MetricReport,
    /// `confusion[label][predicted]`, classes in ordinal order.
    pub confusion: [[usize; 3]; 3],
    pub kde: KdeReport,
}

/// Scores diagnoses against manifest labels.
pub fn evaluate(
    results: &[DiagnosisResult],
    manifest: &DatasetManifest,
    filter: &SlideFilter,
) -> Result<EvalReport, CliError> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut confidences = Vec::new();
    for r in results {
        let Some(e) = manifest.get(&r.slide_id) else {
            warn!(slide = %r.slide_id, "not in manifest; ignored");
            continue;
        };
        let Some(label) = e.label else { continue };
        if !filter.matches(e) {
            continue;
        }
        preds.push(r.predicted);
        labels.push(label);
        confidences.push(r.confidence.get(r.predicted));
    }
    if preds.is_empty() {
        return Err(MetricError::EmptyInput.into());
    }
    let n = preds.len();
    let acc = accuracy(&preds, &labels)?;
    let bin = binary_accuracy(&preds, &labels)?;
    let positives = labels.iter().filter(|l| l.is_lesion()).count();
    let sens = match sensitivity(&preds, &labels) {
        Ok(s) => Some(confidence_interval("sensitivity", s, positives, Z_95)),
        Err(MetricError::NoPositives) => None,
        Err(e) => return Err(e.into()),
    };
    let mut confusion = [[0usize; 3]; 3];
    for (p, l) in preds.iter().zip(&labels) {
        confusion[l.index()][p.index()] += 1;
    }
    let correct: Vec<bool> = preds.iter().zip(&labels).map(|(p, l)| p == l).collect();
    Ok(EvalReport {
        split: filter.split,
        n,
        accuracy: confidence_interval("accuracy", acc, n, Z_95),
        binary_accuracy: confidence_interval("binary_accuracy", bin, n, Z_95),
        sensitivity: sens,
        qwk: MetricReport::without_interval("qwk", qwk_labels(&preds, &labels)?, n),
        confusion,
        kde: confidence_kde(&confidences, &correct)?,
    })
}

/// Evaluates `results/diagnoses.jsonl` and writes `reports/eval.json` and
/// `reports/kde.csv`.
pub fn eval(cfg: &RunConfig, filter: &SlideFilter) -> Result<EvalReport, CliError> {
    let manifest = load_manifest(cfg)?;
    let wd = workdir(cfg);
    let path = wd.diagnoses();
    if !path.exists() {
        return Err(CliError::MissingInput(format!(
            "{} does not exist; run `colomil infer` first",
            path.display()
        )));
    }
    let results: Vec<DiagnosisResult> = read_jsonl(&path)?;
    let report = evaluate(&results, &manifest, filter)?;
    write_json(&wd.reports().join("eval.json"), &report)?;
    write_kde_csv(&wd.reports().join("kde.csv"), &report.kde)?;
    Ok(report)
}

fn write_kde_csv(path: &Path, kde: &KdeReport) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    w.write_record(["confidence", "correct", "incorrect"]).map_err(csv_err)?;
    for (i, x) in kde.grid.iter().enumerate() {
        let cell = |c: &Option<colomil_core::eval::DensityCurve>| {
            c.as_ref().map_or(String::new(), |d| format!("{:.6}", d.density[i]))
        };
        w.write_record([format!("{x:.3}"), cell(&kde.correct), cell(&kde.incorrect)])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    write_text(path, &String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Which tiles count as relevant when measuring what Top-k sampling loses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relevance {
    /// The tile's true label equals the slide label.
    SameLabel,
    /// The tile was trained on in some weak epoch.
    Selected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionCurve {
    pub relevance: Relevance,
    pub slides: usize,
    pub points: Vec<RetentionPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub ks: Vec<usize>,
    pub epochs: usize,
    pub max_tiles: usize,
    pub curves: Vec<RetentionCurve>,
}

/// Retention curves from the full rankings recorded during training. The
/// same-label curve needs `truth_dir`; slides without a truth file are left
/// out of it.
pub fn retention(cfg: &RunConfig, ks: &[usize]) -> Result<RetentionReport, CliError> {
    let manifest = load_manifest(cfg)?;
    let wd = workdir(cfg);
    let dir = wd.rankings().join("full");
    let mut files: Vec<_> = fs::read_dir(&dir)
        .map_err(|_| {
            CliError::MissingInput(format!(
                "{} not found; train with record_rankings enabled",
                dir.display()
            ))
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::MissingInput(format!("no rankings in {}", dir.display())));
    }
    let epochs = files
        .iter()
        .map(|f| load_rankings(f))
        .collect::<Result<Vec<_>, _>>()?;

    let mut selected: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    let sel_path = wd.rankings().join("selections.jsonl");
    if sel_path.exists() {
        for s in read_jsonl::<SelectionRecord>(&sel_path)? {
            selected.entry(s.slide_id).or_default().extend(s.tiles);
        }
    }
    let mut same_label: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    if let Some(truth) = &cfg.truth_dir {
        for r in &epochs[0] {
            let path = truth.join(format!("{}.truth.jsonl", r.slide_id));
            let Some(label) = manifest.get(&r.slide_id).and_then(|e| e.label) else {
                continue;
            };
            if !path.exists() {
                continue;
            }
            let cells: HashMap<(u32, u32), ClassLabel> = TileAnnotation::load_all(&path)?
                .into_iter()
                .map(|a| ((a.x, a.y), a.label))
                .collect();
            let rel = r
                .entries
                .iter()
                .filter(|e| {
                    let l = cells
                        .get(&(e.tile.origin_x, e.tile.origin_y))
                        .copied()
                        .unwrap_or(ClassLabel::NonNeoplastic);
                    l == label
                })
                .map(|e| e.tile.index)
                .collect();
            same_label.insert(r.slide_id.clone(), rel);
        }
    } else {
        warn!("no truth_dir configured; the same-label curve is omitted");
    }

    let curve = |relevance: Relevance, sets: &BTreeMap<String, BTreeSet<usize>>| {
        let data: Vec<Vec<RankedSlide>> = epochs
            .iter()
            .map(|rs| {
                rs.iter()
                    .filter_map(|r| {
                        sets.get(&r.slide_id).map(|rel| RankedSlide {
                            ranked: r.entries.iter().map(|e| e.tile.index).collect(),
                            relevant: rel.clone(),
                        })
                    })
                    .collect()
            })
            .collect();
        RetentionCurve {
            relevance,
            slides: data.first().map_or(0, Vec::len),
            points: retention_curve(&data, ks),
        }
    };
    let mut curves = Vec::new();
    if cfg.truth_dir.is_some() {
        curves.push(curve(Relevance::SameLabel, &same_label));
    }
    if !selected.is_empty() {
        curves.push(curve(Relevance::Selected, &selected));
    }
    let report = RetentionReport {
        ks: ks.to_vec(),
        epochs: epochs.len(),
        max_tiles: epochs[0].iter().map(|r| r.len()).max().unwrap_or(0),
        curves,
    };
    write_json(&wd.reports().join("retention.json"), &report)?;
    Ok(report)
}

/// Reads the sampled sets written by `train`.
pub fn load_sampled(cfg: &RunConfig) -> Result<Vec<SampledSet>, CliError> {
    read_jsonl(&workdir(cfg).rankings().join("sampled.jsonl"))
}
