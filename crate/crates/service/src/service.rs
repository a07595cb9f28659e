//! Request-independent service logic. Jobs run on blocking threads; the
//! HTTP layer decides when.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{SecondsFormat, Utc};
use colomil_core::label::ClassLabel;
use colomil_core::mil::{infer_slide, DiagnosisResult, MilError, SlideTileSource};
use colomil_core::scorer::TileScorer;
use colomil_core::slide::{open_slide, SlideError};
use colomil_core::tiler::tile_grid;
use colomil_core::tissue::segment_tissue;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::error::ServiceError;
use crate::heatmap::{render, HeatmapSpec};
use crate::store::{
    result_key, Feedback, JobState, SlideEntry, Store, StoredResult, Verdict,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub listen: String,
    /// Holds the database, uploaded slides and rendered heatmaps.
    pub workdir: PathBuf,
    pub checkpoint: PathBuf,
    /// One `user:token` pair per line. Without it every request is allowed.
    pub token_file: Option<PathBuf>,
    /// Slides processed concurrently.
    pub workers: usize,
    pub tile_size: u32,
    /// Downsample factor of tissue masks and heatmap thumbnails.
    pub mask_factor: u32,
    pub tissue_threshold: f64,
    pub top_n: usize,
    pub batch_infer: usize,
}

/// Status of one slide, with its result once done.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub slide_id: String,
    pub filename: String,
    pub state: JobState,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    /// Set when a submission was answered from the result cache.
    #[serde(default)]
    pub cached: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub result: Option<DiagnosisResult>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub verdict: String,
    #[serde(default)]
    pub comment: Option<String>,
    #[serde(default)]
    pub corrected_label: Option<String>,
    #[serde(default)]
    pub author: Option<String>,
}

/// One row of the CSV export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub id: String,
    pub predicted: Option<ClassLabel>,
    pub p_nneo: Option<f64>,
    pub p_lg: Option<f64>,
    pub p_hg: Option<f64>,
    pub model_version: Option<String>,
    pub latest_verdict: Option<Verdict>,
    pub corrected_label: Option<ClassLabel>,
}

pub const EXPORT_HEADER: [&str; 8] = [
    "id",
    "predicted",
    "p_nneo",
    "p_lg",
    "p_hg",
    "model_version",
    "latest_verdict",
    "corrected_label",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExportFilter {
    pub state: Option<JobState>,
    pub verdict: Option<Verdict>,
}

pub struct Service {
    cfg: ServiceConfig,
    store: Store,
    scorer: Arc<dyn TileScorer + Send + Sync>,
    input_size: u32,
    tokens: HashMap<String, String>,
    in_flight: Mutex<HashSet<String>>,
    computed: AtomicUsize,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true)
}

/// File extension for the slide formats recognised by their magic bytes.
fn sniff(bytes: &[u8]) -> Option<&'static str> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        Some("png")
    } else if bytes.starts_with(b"II*\0") || bytes.starts_with(b"MM\0*") {
        Some("tiff")
    } else {
        None
    }
}

fn load_tokens(path: &Path) -> Result<HashMap<String, String>, ServiceError> {
    let text = fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (user, token) = line.split_once(':').ok_or_else(|| {
            ServiceError::Internal(format!("token file line `{line}` is not user:token"))
        })?;
        out.insert(token.trim().to_string(), user.trim().to_string());
    }
    Ok(out)
}

impl Service {
    /// Opens or creates the service state under `cfg.workdir`. Jobs left
    /// queued or processing by an earlier process are returned for
    /// rescheduling.
    pub fn open(
        cfg: ServiceConfig,
        scorer: Arc<dyn TileScorer + Send + Sync>,
        input_size: u32,
    ) -> Result<(Arc<Self>, Vec<String>), ServiceError> {
        if cfg.tile_size % cfg.mask_factor != 0 || cfg.tile_size % input_size != 0 {
            return Err(ServiceError::Internal(format!(
                "tile size {} must be a multiple of the mask factor {} and input size {input_size}",
                cfg.tile_size, cfg.mask_factor
            )));
        }
        for sub in ["uploads", "heatmaps"] {
            fs::create_dir_all(cfg.workdir.join(sub))?;
        }
        let store = Store::open(&cfg.workdir.join("service.redb"))?;
        let tokens = match &cfg.token_file {
            Some(p) => load_tokens(p)?,
            None => HashMap::new(),
        };
        let mut pending = Vec::new();
        for e in store.slides()? {
            if matches!(e.state, JobState::Queued | JobState::Processing) {
                store.transition(&e.id, JobState::Queued, None)?;
                pending.push(e.id);
            }
        }
        let svc = Arc::new(Self {
            cfg,
            store,
            scorer,
            input_size,
            tokens,
            in_flight: Mutex::new(HashSet::new()),
            computed: AtomicUsize::new(0),
        });
        Ok((svc, pending))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn model_version(&self) -> &str {
        self.scorer.version()
    }

    /// Slides scored by this process, cache hits excluded.
    pub fn computations(&self) -> usize {
        self.computed.load(Ordering::SeqCst)
    }

    /// `None` when no token file is configured; otherwise the user owning
    /// the token, or `Unauthorized`.
    pub fn authenticate(&self, token: Option<&str>) -> Result<Option<String>, ServiceError> {
        if self.cfg.token_file.is_none() {
            return Ok(None);
        }
        token
            .and_then(|t| self.tokens.get(t))
            .map(|u| Some(u.clone()))
            .ok_or(ServiceError::Unauthorized)
    }

    fn uploads(&self) -> PathBuf {
        self.cfg.workdir.join("uploads")
    }

    fn status_of(&self, e: &SlideEntry, cached: bool) -> Result<JobStatus, ServiceError> {
        let result = match (&e.state, &e.result_key) {
            (JobState::Done, Some(k)) => self.store.result(k)?.map(|r| r.diagnosis),
            _ => None,
        };
        Ok(JobStatus {
            slide_id: e.id.clone(),
            filename: e.filename.clone(),
            state: e.state,
            error: e.error.clone(),
            cached,
            result,
        })
    }

    /// Registers an uploaded slide. Returns the status and whether a job
    /// must be scheduled.
    pub fn submit_upload(&self, filename: &str, bytes: &[u8]) -> Result<(JobStatus, bool), ServiceError> {
        let hash = hex::encode(Sha256::digest(bytes));
        let id = format!("s{}", &hash[..16]);
        let key = result_key(&hash, self.model_version());
        let existing = self.store.slide(&id)?;
        if let Some(e) = &existing {
            if matches!(e.state, JobState::Queued | JobState::Processing) {
                return Ok((self.status_of(e, false)?, false));
            }
            if e.result_key.as_deref() == Some(key.as_str()) && e.state == JobState::Done {
                return Ok((self.status_of(e, true)?, false));
            }
        }
        let Some(ext) = sniff(bytes) else {
            let entry = SlideEntry {
                id,
                filename: filename.into(),
                content_hash: hash,
                file: String::new(),
                state: JobState::Failed,
                error: Some(ServiceError::Slide(SlideError::UnsupportedFormat(filename.into())).to_string()),
                result_key: None,
                submitted_at: now(),
            };
            self.store.put_slide(&entry)?;
            return Ok((self.status_of(&entry, false)?, false));
        };
        let file = format!("{id}.{ext}");
        let path = self.uploads().join(&file);
        if !path.exists() {
            let tmp = path.with_extension("part");
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        let mut entry = SlideEntry {
            id,
            filename: filename.into(),
            content_hash: hash,
            file,
            state: JobState::Queued,
            error: None,
            result_key: None,
            submitted_at: now(),
        };
        if let Err(e) = open_slide(&path) {
            entry.state = JobState::Failed;
            entry.error = Some(e.to_string());
            self.store.put_slide(&entry)?;
            return Ok((self.status_of(&entry, false)?, false));
        }
        if self.store.has_result(&key)? {
            self.store.put_slide(&entry)?;
            self.store.transition(&entry.id, JobState::Processing, None)?;
            let done = self.store.complete(&entry.id, &key, None)?;
            return Ok((self.status_of(&done, true)?, false));
        }
        self.store.put_slide(&entry)?;
        Ok((self.status_of(&entry, false)?, true))
    }

    /// Re-evaluates a known slide without re-uploading it. Answers from the
    /// cache when the current model already scored it.
    pub fn submit_id(&self, id: &str) -> Result<(JobStatus, bool), ServiceError> {
        let e = self
            .store
            .slide(id)?
            .ok_or_else(|| ServiceError::UnknownSlide(id.into()))?;
        if matches!(e.state, JobState::Queued | JobState::Processing) {
            return Ok((self.status_of(&e, false)?, false));
        }
        if e.file.is_empty() {
            return Ok((self.status_of(&e, false)?, false));
        }
        let key = result_key(&e.content_hash, self.model_version());
        if self.store.has_result(&key)? {
            let e = if e.result_key.as_deref() == Some(key.as_str()) && e.state == JobState::Done {
                e
            } else {
                self.store.transition(id, JobState::Queued, None)?;
                self.store.transition(id, JobState::Processing, None)?;
                self.store.complete(id, &key, None)?
            };
            return Ok((self.status_of(&e, true)?, false));
        }
        let e = self.store.transition(id, JobState::Queued, None)?;
        Ok((self.status_of(&e, false)?, true))
    }

    /// Runs a queued job to completion. Does nothing when the slide is not
    /// queued or another worker already holds it.
    pub fn process(&self, id: &str) -> Result<(), ServiceError> {
        if !self.in_flight.lock().expect("lock").insert(id.to_string()) {
            return Ok(());
        }
        let out = self.process_held(id);
        self.in_flight.lock().expect("lock").remove(id);
        out
    }

    fn process_held(&self, id: &str) -> Result<(), ServiceError> {
        match self.store.slide(id)? {
            Some(e) if e.state == JobState::Queued => {}
            Some(_) => return Ok(()),
            None => return Err(ServiceError::UnknownSlide(id.into())),
        }
        let entry = self.store.transition(id, JobState::Processing, None)?;
        let key = result_key(&entry.content_hash, self.model_version());
        if self.store.has_result(&key)? {
            self.store.complete(id, &key, None)?;
            return Ok(());
        }
        match self.compute(&entry) {
            Ok(result) => {
                self.computed.fetch_add(1, Ordering::SeqCst);
                self.store.complete(id, &key, Some(&result))?;
                info!(slide = id, predicted = %result.diagnosis.predicted, "diagnosed");
            }
            Err(e) => {
                warn!(slide = id, error = %e, "job failed");
                self.store.transition(id, JobState::Failed, Some(e.to_string()))?;
            }
        }
        Ok(())
    }

    fn compute(&self, entry: &SlideEntry) -> Result<StoredResult, ServiceError> {
        let slide = open_slide(self.uploads().join(&entry.file))?;
        let mask = segment_tissue(&slide, self.cfg.mask_factor)?;
        let tiles = tile_grid(slide.record(), &mask, self.cfg.tile_size, self.cfg.tissue_threshold)?;
        if tiles.is_empty() {
            return Err(MilError::EmptySlide(entry.id.clone()).into());
        }
        let source = SlideTileSource::new([&slide], self.input_size);
        let (mut diagnosis, ranking) = infer_slide(
            self.scorer.as_ref(),
            &source,
            &entry.id,
            &tiles.refs,
            self.cfg.top_n,
            self.cfg.batch_infer,
        )?;
        diagnosis.timestamp = Some(now());
        Ok(StoredResult {
            diagnosis,
            tiles: ranking.entries,
        })
    }

    pub fn status(&self, id: &str) -> Result<JobStatus, ServiceError> {
        let e = self
            .store
            .slide(id)?
            .ok_or_else(|| ServiceError::UnknownSlide(id.into()))?;
        self.status_of(&e, false)
    }

    pub fn list(&self) -> Result<Vec<JobStatus>, ServiceError> {
        self.store
            .slides()?
            .iter()
            .map(|e| self.status_of(e, false))
            .collect()
    }

    fn finished(&self, id: &str) -> Result<(SlideEntry, StoredResult), ServiceError> {
        let e = self
            .store
            .slide(id)?
            .ok_or_else(|| ServiceError::UnknownSlide(id.into()))?;
        let key = match (&e.state, &e.result_key) {
            (JobState::Done, Some(k)) => k.clone(),
            _ => return Err(ServiceError::ResultNotReady(id.into())),
        };
        let r = self
            .store
            .result(&key)?
            .ok_or_else(|| ServiceError::Internal(format!("result {key} is missing")))?;
        Ok((e, r))
    }

    /// The plain thumbnail at the heatmap scale.
    pub fn thumbnail(&self, id: &str) -> Result<image::RgbImage, ServiceError> {
        let (e, _) = self.finished(id)?;
        Ok(open_slide(self.uploads().join(&e.file))?.thumbnail(self.cfg.mask_factor)?)
    }

    /// PNG bytes of the heatmap, rendered once per result and spec.
    pub fn heatmap_png(&self, id: &str, spec: HeatmapSpec) -> Result<Vec<u8>, ServiceError> {
        let (e, r) = self.finished(id)?;
        let key = e.result_key.expect("done slides have a result key").replace(':', "_");
        let path = self.cfg.workdir.join("heatmaps").join(format!(
            "{key}_{}_{:04}.png",
            spec.class.name(),
            (spec.opacity * 1000.0).round() as u32
        ));
        if let Ok(bytes) = fs::read(&path) {
            return Ok(bytes);
        }
        let thumb = open_slide(self.uploads().join(&e.file))?.thumbnail(self.cfg.mask_factor)?;
        let img = render(&thumb, self.cfg.mask_factor, &r.tiles, spec);
        let mut bytes = Vec::new();
        img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| ServiceError::Internal(format!("png encoding failed: {e}")))?;
        let tmp = path.with_extension("part");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, &path)?;
        Ok(bytes)
    }

    pub fn add_feedback(
        &self,
        id: &str,
        req: FeedbackRequest,
        user: Option<String>,
    ) -> Result<Feedback, ServiceError> {
        self.finished(id)?;
        let verdict =
            Verdict::parse(&req.verdict).ok_or_else(|| ServiceError::InvalidVerdict(req.verdict.clone()))?;
        let corrected_label = match req.corrected_label.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(s) => Some(
                s.parse::<ClassLabel>()
                    .map_err(|e| ServiceError::InvalidFeedback(e.to_string()))?,
            ),
        };
        if corrected_label.is_some() && verdict != Verdict::Wrong {
            return Err(ServiceError::InvalidFeedback(
                "corrected_label is only accepted with verdict `wrong`".into(),
            ));
        }
        let fb = Feedback {
            slide_id: id.into(),
            seq: 0,
            verdict,
            comment: req.comment.unwrap_or_default(),
            corrected_label,
            author: user.or(req.author).unwrap_or_else(|| "anonymous".into()),
            timestamp: now(),
        };
        self.store.add_feedback(fb)
    }

    pub fn feedback(&self, id: &str) -> Result<Vec<Feedback>, ServiceError> {
        if self.store.slide(id)?.is_none() {
            return Err(ServiceError::UnknownSlide(id.into()));
        }
        self.store.feedback(id)
    }

    pub fn export_rows(&self, filter: &ExportFilter) -> Result<Vec<ExportRow>, ServiceError> {
        let mut rows = Vec::new();
        for e in self.store.slides()? {
            if filter.state.is_some_and(|s| s != e.state) {
                continue;
            }
            let latest = self.store.feedback(&e.id)?.pop();
            let verdict = latest.as_ref().map(|f| f.verdict);
            if filter.verdict.is_some() && filter.verdict != verdict {
                continue;
            }
            let result = match (&e.state, &e.result_key) {
                (JobState::Done, Some(k)) => self.store.result(k)?.map(|r| r.diagnosis),
                _ => None,
            };
            let p = result.as_ref().map(|r| *r.confidence.values());
            rows.push(ExportRow {
                id: e.id.clone(),
                predicted: result.as_ref().map(|r| r.predicted),
                p_nneo: p.map(|p| p[0]),
                p_lg: p.map(|p| p[1]),
                p_hg: p.map(|p| p[2]),
                model_version: result.map(|r| r.model_version),
                latest_verdict: verdict,
                corrected_label: latest.and_then(|f| f.corrected_label),
            });
        }
        Ok(rows)
    }

    pub fn export_csv(&self, filter: &ExportFilter) -> Result<String, ServiceError> {
        let rows = self.export_rows(filter)?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        let internal = |e: csv::Error| ServiceError::Internal(e.to_string());
        w.write_record(EXPORT_HEADER).map_err(internal)?;
        for r in &rows {
            w.serialize(r).map_err(internal)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
