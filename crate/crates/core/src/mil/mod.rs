//! Severity ranking, Top-k sampling, slide diagnosis and the mixed
//! supervised/weakly-supervised training schedule.

mod mixed;
mod source;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::{ClassLabel, ClassProbs, InvalidSimplex, NUM_CLASSES};
use crate::scorer::{ScorerError, TileScorer};
use crate::slide::SlideError;
use crate::tiler::TileRef;

pub use mixed::{
    run_mixed_supervision, weak_epoch, MilConfig, MilDataset, MilSlide, MixedOutcome,
    SamplingScope, WeakEpochOutcome, WeakSlide,
};
pub use source::{SlideTileSource, TileBank, TileSource};

pub const DEFAULT_SAMPLE_CAP: usize = 200;
pub const DEFAULT_TOP_N: usize = 5;

#[derive(Debug, Error)]
pub enum MilError {
    #[error(transparent)]
    InvalidSimplex(#[from] InvalidSimplex),
    #[error("slide {0} has no tiles")]
    EmptySlide(String),
    #[error("no labels to aggregate")]
    EmptyInput,
    #[error("no labeled training data")]
    EmptyDataset,
    #[error("tile {x},{y} of slide {slide_id} is not available")]
    MissingTile { slide_id: String, x: u32, y: u32 },
    #[error("invalid setting: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad ranking file {}: {reason}", path.display())]
    Parse { path: PathBuf, reason: String },
}

/// `Σ i·p_i` over 1-based class values; lies in `[1, K]`.
pub fn severity_of(p: &ClassProbs) -> f64 {
    p.values()
        .iter()
        .enumerate()
        .map(|(i, v)| (i + 1) as f64 * v)
        .sum()
}

/// Expected severity of a raw probability vector, validating it first.
pub fn expected_severity(p: &[f64]) -> Result<f64, InvalidSimplex> {
    let arr: [f64; NUM_CLASSES] = p.try_into().map_err(|_| InvalidSimplex {
        values: p.to_vec(),
        reason: "wrong number of classes",
    })?;
    Ok(severity_of(&ClassProbs::new(arr)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedTile {
    pub tile: TileRef,
    pub expected_severity: f64,
    pub probs: ClassProbs,
}

/// A slide's tiles from most to least severe; ties by ascending index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityRanking {
    pub slide_id: String,
    pub entries: Vec<RankedTile>,
    pub model_version: String,
}

impl SeverityRanking {
    /// Ranks by the expected severity of each tile's probabilities.
    pub fn from_scores(
        slide_id: &str,
        model_version: &str,
        scored: Vec<(TileRef, ClassProbs)>,
    ) -> Self {
        let keyed = scored
            .into_iter()
            .map(|(t, p)| (t, severity_of(&p), p))
            .collect();
        Self::from_keys(slide_id, model_version, keyed)
    }

    /// Ranks by caller-supplied keys, e.g. transformed severities.
    pub fn from_keys(
        slide_id: &str,
        model_version: &str,
        keyed: Vec<(TileRef, f64, ClassProbs)>,
    ) -> Self {
        let mut entries: Vec<RankedTile> = keyed
            .into_iter()
            .map(|(tile, expected_severity, probs)| RankedTile {
                tile,
                expected_severity,
                probs,
            })
            .collect();
        entries.sort_by(|a, b| {
            b.expected_severity
                .total_cmp(&a.expected_severity)
                .then(a.tile.index.cmp(&b.tile.index))
        });
        Self {
            slide_id: slide_id.to_string(),
            entries,
            model_version: model_version.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self, n: usize) -> &[RankedTile] {
        &self.entries[..n.min(self.entries.len())]
    }

    /// Tile indices in rank order.
    pub fn order(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.tile.index).collect()
    }
}

/// Scores every tile once and ranks them. Tiles are scored in parallel,
/// `chunk` at a time.
pub fn rank_tiles<S, T>(
    scorer: &S,
    source: &T,
    slide_id: &str,
    tiles: &[TileRef],
    chunk: usize,
) -> Result<SeverityRanking, MilError>
where
    S: TileScorer + ?Sized,
    T: TileSource + ?Sized,
{
    if tiles.is_empty() {
        return Err(MilError::EmptySlide(slide_id.to_string()));
    }
    let mut scored = Vec::with_capacity(tiles.len());
    for part in tiles.chunks(chunk.max(1)) {
        let probs: Vec<ClassProbs> = part
            .par_iter()
            .map(|t| {
                let img = source.load(t)?;
                Ok(scorer.score(&img)?)
            })
            .collect::<Result<_, MilError>>()?;
        scored.extend(part.iter().cloned().zip(probs));
    }
    Ok(SeverityRanking::from_scores(
        slide_id,
        scorer.version(),
        scored,
    ))
}

/// The Top-M tiles of a slide under one model version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledSet {
    pub slide_id: String,
    pub refs: Vec<TileRef>,
    pub m: usize,
    pub source_model_version: String,
}

/// First `min(m, n_s)` entries of the ranking.
pub fn sample_topk(ranking: &SeverityRanking, m: usize) -> Result<SampledSet, MilError> {
    if m == 0 {
        return Err(MilError::InvalidConfig("sample cap M must be at least 1".into()));
    }
    Ok(SampledSet {
        slide_id: ranking.slide_id.clone(),
        refs: ranking.top(m).iter().map(|e| e.tile.clone()).collect(),
        m,
        source_model_version: ranking.model_version.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub slides: usize,
    pub total_before: u64,
    pub total_after: u64,
    pub ratio: f64,
}

/// Per-epoch tile budget with and without a cap of `m` tiles per slide.
/// `None` means no cap.
pub fn reduction_report(counts: &[u64], m: Option<u64>) -> ReductionReport {
    let before: u64 = counts.iter().sum();
    let after: u64 = counts.iter().map(|&n| m.map_or(n, |m| n.min(m))).sum();
    ReductionReport {
        slides: counts.len(),
        total_before: before,
        total_after: after,
        ratio: if after == 0 {
            1.0
        } else {
            before as f64 / after as f64
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub slide_id: String,
    pub predicted: ClassLabel,
    /// Class probabilities of the most severe tile.
    pub confidence: ClassProbs,
    pub top_tiles: Vec<RankedTile>,
    pub model_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

/// Diagnosis from a full ranking: the most severe tile decides.
pub fn diagnose(ranking: &SeverityRanking, top_n: usize) -> Result<DiagnosisResult, MilError> {
    let first = ranking
        .entries
        .first()
        .ok_or_else(|| MilError::EmptySlide(ranking.slide_id.clone()))?;
    Ok(DiagnosisResult {
        slide_id: ranking.slide_id.clone(),
        predicted: first.probs.argmax(),
        confidence: first.probs,
        top_tiles: ranking.top(top_n.max(1)).to_vec(),
        model_version: ranking.model_version.clone(),
        timestamp: None,
    })
}

/// Ranks every tile of the slide (no sampling) and diagnoses from the top.
pub fn infer_slide<S, T>(
    scorer: &S,
    source: &T,
    slide_id: &str,
    tiles: &[TileRef],
    top_n: usize,
    chunk: usize,
) -> Result<(DiagnosisResult, SeverityRanking), MilError>
where
    S: TileScorer + ?Sized,
    T: TileSource + ?Sized,
{
    let ranking = rank_tiles(scorer, source, slide_id, tiles, chunk)?;
    Ok((diagnose(&ranking, top_n)?, ranking))
}

/// Slide label from tile labels: the most severe one.
pub fn aggregate_labels(labels: &[ClassLabel]) -> Result<ClassLabel, MilError> {
    labels.iter().copied().max().ok_or(MilError::EmptyInput)
}

#[derive(Serialize, Deserialize)]
struct RankingLine {
    slide_id: String,
    n: usize,
    x: u32,
    y: u32,
    size: u32,
    expected_severity: f64,
    p1: f64,
    p2: f64,
    p3: f64,
    model_version: String,
}

pub fn rankings_to_jsonl(rankings: &[SeverityRanking]) -> String {
    let mut out = String::new();
    for r in rankings {
        for e in &r.entries {
            let [p1, p2, p3] = *e.probs.values();
            let line = RankingLine {
                slide_id: r.slide_id.clone(),
                n: e.tile.index,
                x: e.tile.origin_x,
                y: e.tile.origin_y,
                size: e.tile.size,
                expected_severity: e.expected_severity,
                p1,
                p2,
                p3,
                model_version: r.model_version.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("ranking serializes"));
            out.push('\n');
        }
    }
    out
}

pub fn save_rankings(rankings: &[SeverityRanking], path: &Path) -> Result<(), MilError> {
    let io = |e| MilError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, rankings_to_jsonl(rankings)).map_err(io)
}

/// Reads rankings back in file order, one per slide.
pub fn load_rankings(path: &Path) -> Result<Vec<SeverityRanking>, MilError> {
    let text = std::fs::read_to_string(path).map_err(|e| MilError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let parse = |reason: String| MilError::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut out: Vec<SeverityRanking> = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let l: RankingLine =
            serde_json::from_str(line).map_err(|e| parse(format!("line {}: {e}", i + 1)))?;
        let probs = ClassProbs::new([l.p1, l.p2, l.p3])
            .map_err(|e| parse(format!("line {}: {e}", i + 1)))?;
        let slot = *seen.entry(l.slide_id.clone()).or_insert_with(|| {
            out.push(SeverityRanking {
                slide_id: l.slide_id.clone(),
                entries: Vec::new(),
                model_version: l.model_version.clone(),
            });
            out.len() - 1
        });
        out[slot].entries.push(RankedTile {
            tile: TileRef {
                slide_id: l.slide_id,
                index: l.n,
                origin_x: l.x,
                origin_y: l.y,
                size: l.size,
            },
            expected_severity: l.expected_severity,
            probs,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::*;

    fn tref(n: usize) -> TileRef {
        TileRef {
            slide_id: "s".into(),
            index: n,
            origin_x: n as u32 * 64,
            origin_y: 0,
            size: 64,
        }
    }

    fn probs(p: [f64; 3]) -> ClassProbs {
        ClassProbs::new(p).unwrap()
    }

    #[test]
    fn severity_examples() {
        assert_eq!(expected_severity(&[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(expected_severity(&[0.0, 0.0, 1.0]).unwrap(), 3.0);
        assert!((expected_severity(&[0.2, 0.5, 0.3]).unwrap() - 2.1).abs() < 1e-12);
        assert!(expected_severity(&[0.5, 0.6, 0.0]).is_err());
        assert!(expected_severity(&[0.5, 0.5]).is_err());
    }

    #[test]
    fn ranking_order_and_ties() {
        let r = SeverityRanking::from_keys(
            "s",
            "v",
            vec![
                (tref(0), 1.0, ClassProbs::one_hot(NonNeoplastic)),
                (tref(1), 2.9, ClassProbs::one_hot(HighGrade)),
                (tref(2), 2.1, ClassProbs::one_hot(LowGrade)),
            ],
        );
        assert_eq!(r.order(), vec![1, 2, 0]);
        let tie = SeverityRanking::from_keys(
            "s",
            "v",
            vec![
                (tref(5), 2.0, ClassProbs::one_hot(LowGrade)),
                (tref(3), 2.0, ClassProbs::one_hot(LowGrade)),
            ],
        );
        assert_eq!(tie.order(), vec![3, 5]);
    }

    #[test]
    fn topk_caps() {
        let many: Vec<_> = (0..1293)
            .map(|i| (tref(i), ClassProbs::one_hot(LowGrade)))
            .collect();
        let r = SeverityRanking::from_scores("s", "v", many);
        assert_eq!(sample_topk(&r, 200).unwrap().refs.len(), 200);
        let few: Vec<_> = (0..80).map(|i| (tref(i), ClassProbs::one_hot(LowGrade))).collect();
        let r = SeverityRanking::from_scores("s", "v", few);
        assert_eq!(sample_topk(&r, 200).unwrap().refs.len(), 80);
        assert!(sample_topk(&r, 0).is_err());
    }

    #[test]
    fn reduction_examples() {
        let r = reduction_report(&[100, 300, 50], Some(200));
        assert_eq!((r.total_before, r.total_after), (450, 350));
        assert_eq!(reduction_report(&[100, 300], None).ratio, 1.0);
    }

    #[test]
    fn diagnosis_from_most_severe_tile() {
        let r = SeverityRanking::from_scores(
            "s",
            "v",
            vec![
                (tref(0), ClassProbs::one_hot(NonNeoplastic)),
                (tref(1), probs([0.1, 0.2, 0.7])),
                (tref(2), probs([0.3, 0.6, 0.1])),
            ],
        );
        let d = diagnose(&r, 2).unwrap();
        assert_eq!(d.predicted, HighGrade);
        assert_eq!(d.confidence.get(HighGrade), 0.7);
        assert_eq!(d.top_tiles.len(), 2);
        let empty = SeverityRanking::from_scores("e", "v", vec![]);
        assert!(matches!(diagnose(&empty, 1), Err(MilError::EmptySlide(_))));
    }

    #[test]
    fn max_rule() {
        assert_eq!(aggregate_labels(&[NonNeoplastic, NonNeoplastic, LowGrade]).unwrap(), LowGrade);
        assert_eq!(aggregate_labels(&[HighGrade]).unwrap(), HighGrade);
        assert!(matches!(aggregate_labels(&[]), Err(MilError::EmptyInput)));
    }

    #[test]
    fn rankings_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let r = SeverityRanking::from_scores(
            "s",
            "abc",
            vec![(tref(0), probs([0.2, 0.5, 0.3])), (tref(1), probs([0.0, 0.25, 0.75]))],
        );
        let p = tmp.path().join("r.jsonl");
        save_rankings(std::slice::from_ref(&r), &p).unwrap();
        assert_eq!(load_rankings(&p).unwrap(), vec![r]);
    }
}
