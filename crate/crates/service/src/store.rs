//! Durable state in one embedded transactional database: slide jobs,
//! cached results and append-only feedback.

use std::path::Path;

use colomil_core::label::ClassLabel;
use colomil_core::mil::{DiagnosisResult, RankedTile};
use redb::{Database, ReadableDatabase, ReadableTable, TableDefinition};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

const SLIDES: TableDefinition<&str, &str> = TableDefinition::new("slides");
/// Keyed by `<content hash>:<model version>`.
const RESULTS: TableDefinition<&str, &str> = TableDefinition::new("results");
const FEEDBACK: TableDefinition<(&str, u64), &str> = TableDefinition::new("feedback");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Processing,
    Done,
    Failed,
}

impl JobState {
    /// Allowed moves: queued to processing, processing to done or failed,
    /// and any state back to queued for a resubmission.
    pub fn can_move_to(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Processing) | (Processing, Done) | (Processing, Failed) | (_, Queued)
        )
    }
}

/// One uploaded slide and the state of its latest job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub id: String,
    pub filename: String,
    pub content_hash: String,
    /// Stored slide file, relative to the uploads directory.
    pub file: String,
    pub state: JobState,
    pub error: Option<String>,
    /// Key of the result shown for this slide.
    pub result_key: Option<String>,
    pub submitted_at: String,
}

/// A diagnosis with every scored tile, for heatmaps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredResult {
    pub diagnosis: DiagnosisResult,
    pub tiles: Vec<RankedTile>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Wrong,
    Inconclusive,
}

impl Verdict {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "correct" => Some(Verdict::Correct),
            "wrong" => Some(Verdict::Wrong),
            "inconclusive" => Some(Verdict::Inconclusive),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Correct => "correct",
            Verdict::Wrong => "wrong",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub slide_id: String,
    /// Position in the slide's feedback history.
    pub seq: u64,
    pub verdict: Verdict,
    pub comment: String,
    pub corrected_label: Option<ClassLabel>,
    pub author: String,
    pub timestamp: String,
}

pub fn result_key(content_hash: &str, model_version: &str) -> String {
    format!("{content_hash}:{model_version}")
}

pub struct Store {
    db: Database,
}

fn decode<T: for<'de> Deserialize<'de>>(raw: &str) -> Result<T, ServiceError> {
    serde_json::from_str(raw).map_err(|e| ServiceError::Internal(format!("corrupt record: {e}")))
}

fn encode<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("records serialize")
}

impl Store {
    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        let db = Database::create(path)?;
        let txn = db.begin_write()?;
        txn.open_table(SLIDES)?;
        txn.open_table(RESULTS)?;
        txn.open_table(FEEDBACK)?;
        txn.commit()?;
        Ok(Self { db })
    }

    pub fn slide(&self, id: &str) -> Result<Option<SlideEntry>, ServiceError> {
        let txn = self.db.begin_read()?;
        let table = txn.open_table(SLIDES)?;
        table.get(id)?.map(|v| decode(v.value())).transpose()
    }

    pub fn slides(&self) -> Result<Vec<SlideEntry>, ServiceError> {
        let txn = self.db.begin_read()?;
        let table = txn.open_table(SLIDES)?;
        let mut out = Vec::new();
        for row in table.range::<&str>(..)? {
            let (_, v) = row?;
            out.push(decode(v.value())?);
        }
        Ok(out)
    }

    pub fn put_slide(&self, entry: &SlideEntry) -> Result<(), ServiceError> {
        let txn = self.db.begin_write()?;
        txn.open_table(SLIDES)?
            .insert(entry.id.as_str(), encode(entry).as_str())?;
        txn.commit()?;
        Ok(())
    }

    /// Moves a slide's job to `next` if the transition is allowed and
    /// returns the updated entry.
    pub fn transition(
        &self,
        id: &str,
        next: JobState,
        error: Option<String>,
    ) -> Result<SlideEntry, ServiceError> {
        let txn = self.db.begin_write()?;
        let entry = {
            let mut table = txn.open_table(SLIDES)?;
            let mut entry: SlideEntry = match table.get(id)? {
                Some(v) => decode(v.value())?,
                None => return Err(ServiceError::UnknownSlide(id.into())),
            };
            if !entry.state.can_move_to(next) {
                return Err(ServiceError::Internal(format!(
                    "slide {id}: {:?} cannot move to {next:?}",
                    entry.state
                )));
            }
            entry.state = next;
            entry.error = error;
            table.insert(id, encode(&entry).as_str())?;
            entry
        };
        txn.commit()?;
        Ok(entry)
    }

    /// Stores a result (unless it is already cached under `key`) and marks
    /// the slide done in one transaction, so no reader sees one without the
    /// other.
    pub fn complete(
        &self,
        id: &str,
        key: &str,
        result: Option<&StoredResult>,
    ) -> Result<SlideEntry, ServiceError> {
        let txn = self.db.begin_write()?;
        let entry = {
            let mut slides = txn.open_table(SLIDES)?;
            let mut entry: SlideEntry = match slides.get(id)? {
                Some(v) => decode(v.value())?,
                None => return Err(ServiceError::UnknownSlide(id.into())),
            };
            if !entry.state.can_move_to(JobState::Done) {
                return Err(ServiceError::Internal(format!(
                    "slide {id}: {:?} cannot move to Done",
                    entry.state
                )));
            }
            entry.state = JobState::Done;
            entry.error = None;
            entry.result_key = Some(key.to_string());
            slides.insert(id, encode(&entry).as_str())?;
            if let Some(r) = result {
                txn.open_table(RESULTS)?.insert(key, encode(r).as_str())?;
            }
            entry
        };
        txn.commit()?;
        Ok(entry)
    }

    pub fn result(&self, key: &str) -> Result<Option<StoredResult>, ServiceError> {
        let txn = self.db.begin_read()?;
        let table = txn.open_table(RESULTS)?;
        table.get(key)?.map(|v| decode(v.value())).transpose()
    }

    pub fn has_result(&self, key: &str) -> Result<bool, ServiceError> {
        let txn = self.db.begin_read()?;
        Ok(txn.open_table(RESULTS)?.get(key)?.is_some())
    }

    /// Appends feedback under the next sequence number for its slide.
    pub fn add_feedback(&self, mut fb: Feedback) -> Result<Feedback, ServiceError> {
        let txn = self.db.begin_write()?;
        {
            let mut table = txn.open_table(FEEDBACK)?;
            let id = fb.slide_id.as_str();
            let last = table
                .range((id, 0)..=(id, u64::MAX))?
                .next_back()
                .transpose()?
                .map(|(k, _)| k.value().1);
            fb.seq = last.map_or(0, |s| s + 1);
            table.insert((id, fb.seq), encode(&fb).as_str())?;
        }
        txn.commit()?;
        Ok(fb)
    }

    /// A slide's feedback, oldest first.
    pub fn feedback(&self, slide_id: &str) -> Result<Vec<Feedback>, ServiceError> {
        let txn = self.db.begin_read()?;
        let table = txn.open_table(FEEDBACK)?;
        let mut out = Vec::new();
        for row in table.range((slide_id, 0)..=(slide_id, u64::MAX))? {
            let (_, v) = row?;
            out.push(decode(v.value())?);
        }
        Ok(out)
    }
}
