//! Task dispatch and score collection, independent of HTTP.
//!
//! Every change is an [`Event`]. The desk appends events to a JSON-lines
//! log before applying them, and rebuilds itself by replaying the log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use musicform_core::backend::{splitmix64, Fnv1a};
use musicform_core::stats::{
    check_score, qualify_rater, QualificationKind, QualificationPlan, RatingContext, RatingRecord,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeskError {
    #[error("unknown clip {0:?}")]
    UnknownClip(String),
    #[error("a batch needs at least one clip and one rater per clip")]
    EmptyBatch,
    #[error("unknown batch {0:?}")]
    UnknownBatch(String),
    #[error("rater {rater} is blocked: {reason}")]
    RaterBlocked { rater: String, reason: String },
    #[error("score {0} is outside 1..=5")]
    ScoreOutOfRange(i64),
    #[error("task {0} was already scored")]
    DuplicateSubmission(String),
    #[error("task {task} is not assigned to rater {rater}")]
    NotAssigned { task: String, rater: String },
    #[error("invalid id {0:?}")]
    InvalidId(String),
    #[error("event log: {0}")]
    Log(String),
}

impl DeskError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownClip(_) => "unknown_clip",
            Self::EmptyBatch => "empty_batch",
            Self::UnknownBatch(_) => "unknown_batch",
            Self::RaterBlocked { .. } => "rater_blocked",
            Self::ScoreOutOfRange(_) => "score_out_of_range",
            Self::DuplicateSubmission(_) => "duplicate_submission",
            Self::NotAssigned { .. } => "not_assigned",
            Self::InvalidId(_) => "invalid_id",
            Self::Log(_) => "storage_error",
        }
    }
}

pub type Result<T> = std::result::Result<T, DeskError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Study,
    Qualification,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingTask {
    pub task_id: String,
    pub rater_id: String,
    pub clip_id: String,
    pub kind: TaskKind,
    /// Expected score of an instructed qualification clip. Never sent to raters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructed_score: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: String,
    pub clips: Vec<String>,
    pub raters_needed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    BatchCreated(Batch),
    Assigned(RatingTask),
    Scored {
        task_id: String,
        score: u8,
        timestamp: u64,
    },
    Qualified {
        rater_id: String,
        passed: bool,
        failures: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaterStatus {
    Qualifying,
    Qualified,
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchProgress {
    pub batch_id: String,
    pub clips: usize,
    pub raters_needed: usize,
    pub slots: usize,
    pub assigned: usize,
    pub completed: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub task_id: String,
    pub rater_status: RaterStatus,
}

/// Qualification clips: ids and kinds, in serving order before shuffling.
pub fn qualification_clips(plan: &QualificationPlan, seed: u64) -> Vec<(String, QualificationKind)> {
    let mut out = Vec::with_capacity(plan.total());
    for i in 0..plan.instructed {
        let score = 1 + (splitmix64(seed ^ (i as u64 + 1)) % 5) as u8;
        out.push((format!("qual/instructed-{i}"), QualificationKind::Instructed(score)));
    }
    for i in 0..plan.silence {
        out.push((format!("qual/silence-{i}"), QualificationKind::Silence));
    }
    for i in 0..plan.plain {
        out.push((format!("qual/plain-{i}"), QualificationKind::Plain));
    }
    out
}

/// Clip ids are `/`-separated segments of `[A-Za-z0-9_.-]`, no `..`.
pub fn check_clip_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.split('/').all(|seg| {
            !seg.is_empty() && seg != "." && seg != ".." && seg.chars().all(|c| c.is_ascii_alphanumeric() || "_.-".contains(c))
        });
    if ok {
        Ok(())
    } else {
        Err(DeskError::InvalidId(id.to_string()))
    }
}

fn check_rater_id(id: &str) -> Result<()> {
    if !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || "_.-@".contains(c)) {
        Ok(())
    } else {
        Err(DeskError::InvalidId(id.to_string()))
    }
}

#[derive(Debug, Default)]
struct RaterState {
    status: Option<RaterStatus>,
    failures: Vec<String>,
    /// Task ids in assignment order.
    tasks: Vec<String>,
    clips_seen: BTreeSet<String>,
}

#[derive(Debug)]
pub struct RatingDesk {
    plan: QualificationPlan,
    seed: u64,
    qual_key: BTreeMap<String, QualificationKind>,
    qual_order: Vec<String>,
    batches: Vec<Batch>,
    tasks: BTreeMap<String, RatingTask>,
    scores: BTreeMap<String, (u8, u64)>,
    raters: BTreeMap<String, RaterState>,
    /// Assigned study slots per (batch, clip).
    slots: BTreeMap<(String, String), usize>,
    next_task: u64,
    log: Option<File>,
    log_path: Option<PathBuf>,
}

impl RatingDesk {
    /// A desk without persistence.
    pub fn in_memory(plan: QualificationPlan, seed: u64) -> Self {
        let clips = qualification_clips(&plan, seed);
        Self {
            plan,
            seed,
            qual_order: clips.iter().map(|(c, _)| c.clone()).collect(),
            qual_key: clips.into_iter().collect(),
            batches: Vec::new(),
            tasks: BTreeMap::new(),
            scores: BTreeMap::new(),
            raters: BTreeMap::new(),
            slots: BTreeMap::new(),
            next_task: 0,
            log: None,
            log_path: None,
        }
    }

    /// Replay `path` if it exists, then append new events to it.
    pub fn open(path: impl AsRef<Path>, plan: QualificationPlan, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        let mut desk = Self::in_memory(plan, seed);
        if path.exists() {
            let file = File::open(path).map_err(|e| DeskError::Log(e.to_string()))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| DeskError::Log(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: Event =
                    serde_json::from_str(&line).map_err(|e| DeskError::Log(format!("line {}: {e}", n + 1)))?;
                desk.apply(&event);
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| DeskError::Log(e.to_string()))?;
        desk.log = Some(log);
        desk.log_path = Some(path.to_path_buf());
        Ok(desk)
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    pub fn qualification_plan(&self) -> QualificationPlan {
        self.plan
    }

    pub fn qualification_kind(&self, clip_id: &str) -> Option<QualificationKind> {
        self.qual_key.get(clip_id).copied()
    }

    fn commit(&mut self, event: Event) -> Result<()> {
        if let Some(log) = &mut self.log {
            let line = serde_json::to_string(&event).map_err(|e| DeskError::Log(e.to_string()))?;
            writeln!(log, "{line}")
                .and_then(|_| log.flush())
                .map_err(|e| DeskError::Log(e.to_string()))?;
        }
        self.apply(&event);
        Ok(())
    }

    fn apply(&mut self, event: &Event) {
        match event {
            Event::BatchCreated(b) => self.batches.push(b.clone()),
            Event::Assigned(t) => {
                let rater = self.raters.entry(t.rater_id.clone()).or_default();
                rater.status.get_or_insert(RaterStatus::Qualifying);
                rater.tasks.push(t.task_id.clone());
                rater.clips_seen.insert(t.clip_id.clone());
                if let Some(b) = &t.batch_id {
                    *self.slots.entry((b.clone(), t.clip_id.clone())).or_default() += 1;
                }
                if let Some(n) = t.task_id.strip_prefix('t').and_then(|n| n.parse::<u64>().ok()) {
                    self.next_task = self.next_task.max(n + 1);
                }
                self.tasks.insert(t.task_id.clone(), t.clone());
            }
            Event::Scored {
                task_id,
                score,
                timestamp,
            } => {
                self.scores.insert(task_id.clone(), (*score, *timestamp));
            }
            Event::Qualified {
                rater_id,
                passed,
                failures,
            } => {
                let r = self.raters.entry(rater_id.clone()).or_default();
                r.status = Some(if *passed { RaterStatus::Qualified } else { RaterStatus::Blocked });
                r.failures = failures.clone();
            }
        }
    }

    /// Create a batch after checking that every clip exists.
    pub fn enqueue_batch(&mut self, clips: Vec<String>, raters_needed: usize, exists: impl Fn(&str) -> bool) -> Result<String> {
        if clips.is_empty() || raters_needed == 0 {
            return Err(DeskError::EmptyBatch);
        }
        for c in &clips {
            check_clip_id(c)?;
            if !exists(c) {
                return Err(DeskError::UnknownClip(c.clone()));
            }
        }
        let batch_id = format!("b{}", self.batches.len());
        self.commit(Event::BatchCreated(Batch {
            batch_id: batch_id.clone(),
            clips,
            raters_needed,
        }))?;
        Ok(batch_id)
    }

    pub fn rater_status(&self, rater_id: &str) -> RaterStatus {
        self.raters
            .get(rater_id)
            .and_then(|r| r.status)
            .unwrap_or(RaterStatus::Qualifying)
    }

    /// The rater's open task, or a newly assigned one; `None` when nothing is left.
    pub fn next_task(&mut self, rater_id: &str) -> Result<Option<RatingTask>> {
        check_rater_id(rater_id)?;
        let state = self.raters.get(rater_id);
        if let Some(r) = state {
            if r.status == Some(RaterStatus::Blocked) {
                return Err(DeskError::RaterBlocked {
                    rater: rater_id.to_string(),
                    reason: format!("failed qualification checks: {}", r.failures.join(", ")),
                });
            }
            if let Some(open) = r.tasks.iter().find(|t| !self.scores.contains_key(*t)) {
                return Ok(Some(self.tasks[open].clone()));
            }
        }
        let seen = state.map(|r| r.clips_seen.clone()).unwrap_or_default();
        let task = match self.rater_status(rater_id) {
            RaterStatus::Qualifying => {
                let order = self.shuffled_qualification(rater_id);
                order.into_iter().find(|c| !seen.contains(c)).map(|clip| RatingTask {
                    task_id: String::new(),
                    rater_id: rater_id.to_string(),
                    instructed_score: match self.qual_key[&clip] {
                        QualificationKind::Instructed(s) => Some(s),
                        _ => None,
                    },
                    clip_id: clip,
                    kind: TaskKind::Qualification,
                    batch_id: None,
                })
            }
            RaterStatus::Qualified => self.batches.iter().find_map(|b| {
                b.clips
                    .iter()
                    .find(|c| {
                        !seen.contains(*c)
                            && self.slots.get(&(b.batch_id.clone(), (*c).clone())).copied().unwrap_or(0) < b.raters_needed
                    })
                    .map(|c| RatingTask {
                        task_id: String::new(),
                        rater_id: rater_id.to_string(),
                        clip_id: c.clone(),
                        kind: TaskKind::Study,
                        instructed_score: None,
                        batch_id: Some(b.batch_id.clone()),
                    })
            }),
            RaterStatus::Blocked => unreachable!("handled above"),
        };
        match task {
            Some(mut t) => {
                t.task_id = format!("t{}", self.next_task);
                self.commit(Event::Assigned(t.clone()))?;
                Ok(Some(t))
            }
            None => Ok(None),
        }
    }

    fn shuffled_qualification(&self, rater_id: &str) -> Vec<String> {
        let salt = Fnv1a::new().bytes(rater_id.as_bytes()).finish() ^ self.seed;
        let mut order = self.qual_order.clone();
        order.sort_by_key(|c| splitmix64(salt ^ Fnv1a::new().bytes(c.as_bytes()).finish()));
        order
    }

    pub fn submit_score(&mut self, rater_id: &str, task_id: &str, score: i64, timestamp: u64) -> Result<SubmitAck> {
        let score = check_score(score).map_err(|_| DeskError::ScoreOutOfRange(score))?;
        let task = match self.tasks.get(task_id) {
            Some(t) if t.rater_id == rater_id => t.clone(),
            _ => {
                return Err(DeskError::NotAssigned {
                    task: task_id.to_string(),
                    rater: rater_id.to_string(),
                })
            }
        };
        if self.scores.contains_key(task_id) {
            return Err(DeskError::DuplicateSubmission(task_id.to_string()));
        }
        self.commit(Event::Scored {
            task_id: task_id.to_string(),
            score,
            timestamp,
        })?;
        if task.kind == TaskKind::Qualification && self.rater_status(rater_id) == RaterStatus::Qualifying {
            let records = self.records_of(rater_id);
            let done = records.iter().filter(|r| r.context == RatingContext::Qualification).count();
            if done >= self.plan.total() {
                let result = qualify_rater(rater_id, &records, &self.qual_key, self.plan.total())
                    .map_err(|e| DeskError::Log(e.to_string()))?;
                self.commit(Event::Qualified {
                    rater_id: rater_id.to_string(),
                    passed: result.passed,
                    failures: result.failures,
                })?;
            }
        }
        Ok(SubmitAck {
            task_id: task_id.to_string(),
            rater_status: self.rater_status(rater_id),
        })
    }

    fn record(&self, task: &RatingTask) -> Option<RatingRecord> {
        self.scores.get(&task.task_id).map(|&(score, timestamp)| RatingRecord {
            rater_id: task.rater_id.clone(),
            clip_id: task.clip_id.clone(),
            score,
            timestamp,
            context: match task.kind {
                TaskKind::Study => RatingContext::Study,
                TaskKind::Qualification => RatingContext::Qualification,
            },
        })
    }

    fn records_of(&self, rater_id: &str) -> Vec<RatingRecord> {
        self.raters
            .get(rater_id)
            .map(|r| r.tasks.iter().filter_map(|t| self.record(&self.tasks[t])).collect())
            .unwrap_or_default()
    }

    /// Every scored task in task order.
    pub fn records(&self) -> Vec<RatingRecord> {
        let mut tasks: Vec<&RatingTask> = self.tasks.values().collect();
        tasks.sort_by_key(|t| t.task_id[1..].parse::<u64>().unwrap_or(u64::MAX));
        tasks.into_iter().filter_map(|t| self.record(t)).collect()
    }

    /// Raters who failed qualification.
    pub fn blocked_raters(&self) -> BTreeSet<String> {
        self.raters
            .iter()
            .filter(|(_, r)| r.status == Some(RaterStatus::Blocked))
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn progress(&self, batch_id: &str) -> Result<BatchProgress> {
        let b = self
            .batches
            .iter()
            .find(|b| b.batch_id == batch_id)
            .ok_or_else(|| DeskError::UnknownBatch(batch_id.to_string()))?;
        let in_batch: Vec<&RatingTask> = self
            .tasks
            .values()
            .filter(|t| t.batch_id.as_deref() == Some(batch_id))
            .collect();
        let completed = in_batch
            .iter()
            .filter(|t| self.scores.contains_key(&t.task_id) && self.rater_status(&t.rater_id) == RaterStatus::Qualified)
            .count();
        let slots = b.clips.len() * b.raters_needed;
        Ok(BatchProgress {
            batch_id: b.batch_id.clone(),
            clips: b.clips.len(),
            raters_needed: b.raters_needed,
            slots,
            assigned: in_batch.len(),
            completed,
            done: completed == slots,
        })
    }
}
