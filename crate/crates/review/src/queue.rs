use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use codealign::jsonl::write_jsonl;
use codealign::pipeline::DecisionRecord;
use codealign::terminology::{is_valid_code_syntax, normalize_code, Terminology};
use codealign::uncertainty::{select_deferrals, DeferralPolicy};
use serde::{Deserialize, Serialize};

use crate::item::{ReviewItem, Status};
use crate::ReviewError;

/// The marker accepted in place of a code.
pub const UNMAPPABLE: &str = "unmappable";

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Enqueue {
        records: Vec<DecisionRecord>,
        deferred: Vec<String>,
    },
    Adjudicate {
        record_id: String,
        code: Option<String>,
        unmappable: bool,
        reviewer: Option<String>,
        at: String,
    },
    Skip {
        record_id: String,
        reviewer: Option<String>,
        at: String,
    },
}

/// A reviewer's decision: a code, or the unmappable marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Code(String),
    Unmappable,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub pending: usize,
    pub adjudicated: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub items: Vec<ReviewItem>,
    pub page: usize,
    pub page_size: usize,
    /// Items matching the filter, across all pages.
    pub total: usize,
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnqueueSummary {
    pub records_added: usize,
    pub items_added: usize,
    pub queue_size: usize,
}

#[derive(Debug, Default)]
struct State {
    /// Every enqueued decision, in arrival order.
    records: Vec<DecisionRecord>,
    index: HashMap<String, usize>,
    items: BTreeMap<String, ReviewItem>,
}

/// Review queue state plus its journal. Reads share a lock; every mutation
/// holds the write lock across the journal append, so adjudications are
/// serialized and the first writer wins.
pub struct ReviewQueue {
    state: RwLock<State>,
    journal: Option<Mutex<File>>,
    journal_path: Option<PathBuf>,
    terminologies: BTreeMap<String, Arc<Terminology>>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl ReviewQueue {
    /// A queue without persistence.
    pub fn in_memory(terminologies: Vec<Arc<Terminology>>) -> Self {
        Self {
            state: RwLock::new(State::default()),
            journal: None,
            journal_path: None,
            terminologies: by_system(terminologies),
        }
    }

    /// Opens (or creates) the journal at `path` and replays it.
    pub fn open(path: impl AsRef<Path>, terminologies: Vec<Arc<Terminology>>) -> Result<Self, ReviewError> {
        let path = path.as_ref();
        let io = |e: std::io::Error| ReviewError::Io(format!("{}: {e}", path.display()));
        let terminologies = by_system(terminologies);
        let mut state = State::default();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: Event = serde_json::from_str(&line).map_err(|e| ReviewError::Journal {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                apply(&mut state, event, &terminologies);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(Self {
            state: RwLock::new(state),
            journal: Some(Mutex::new(file)),
            journal_path: Some(path.to_path_buf()),
            terminologies,
        })
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.journal_path.as_deref()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, State> {
        self.state.write().unwrap_or_else(|p| p.into_inner())
    }

    /// Durably appends `event`, then applies it. Callers hold the write lock.
    fn commit(&self, state: &mut State, event: Event) -> Result<(), ReviewError> {
        if let Some(journal) = &self.journal {
            let mut line = serde_json::to_string(&event).map_err(|e| ReviewError::Io(e.to_string()))?;
            line.push('\n');
            let mut file = journal.lock().unwrap_or_else(|p| p.into_inner());
            file.write_all(line.as_bytes())
                .and_then(|_| file.sync_data())
                .map_err(|e| ReviewError::Io(format!("journal append: {e}")))?;
        }
        apply(state, event, &self.terminologies);
        Ok(())
    }

    /// Adds decisions to the queue. Records selected by `policy` (or, without
    /// a policy, those already flagged `deferred`) become PENDING items.
    /// Re-enqueueing identical records is a no-op.
    pub fn enqueue(
        &self,
        records: Vec<DecisionRecord>,
        policy: Option<&DeferralPolicy>,
    ) -> Result<EnqueueSummary, ReviewError> {
        if let Some(p) = policy {
            p.validate()
                .map_err(|e| ReviewError::InvalidRequest(e.to_string()))?;
        }
        let mut seen: HashMap<&str, &DecisionRecord> = HashMap::new();
        for r in &records {
            if let Some(prev) = seen.insert(r.record_id(), r) {
                if prev != r {
                    return Err(ReviewError::DuplicateQueue(r.record_id().to_string()));
                }
            }
        }
        let selected: BTreeSet<String> = match policy {
            Some(p) => {
                let scored: Vec<(String, f64)> = seen
                    .values()
                    .map(|r| (r.record_id().to_string(), r.normalized_entropy.unwrap_or(1.0)))
                    .collect();
                select_deferrals(&scored, p)
            }
            None => seen
                .values()
                .filter(|r| r.deferred)
                .map(|r| r.record_id().to_string())
                .collect(),
        };

        let mut state = self.write();
        for r in &records {
            if let Some(&i) = state.index.get(r.record_id()) {
                if state.records[i] != *r {
                    return Err(ReviewError::DuplicateQueue(r.record_id().to_string()));
                }
            }
        }
        let mut fresh = Vec::new();
        let mut added = BTreeSet::new();
        for r in records {
            if state.index.contains_key(r.record_id()) || !added.insert(r.record_id().to_string()) {
                continue;
            }
            fresh.push(r);
        }
        let deferred: Vec<String> = selected
            .into_iter()
            .filter(|id| !state.items.contains_key(id))
            .collect();
        let summary = EnqueueSummary {
            records_added: fresh.len(),
            items_added: deferred.len(),
            queue_size: state.items.len() + deferred.len(),
        };
        if !fresh.is_empty() || !deferred.is_empty() {
            self.commit(
                &mut state,
                Event::Enqueue {
                    records: fresh,
                    deferred,
                },
            )?;
        }
        Ok(summary)
    }

    pub fn len(&self) -> usize {
        self.read().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> Counts {
        counts(&self.read())
    }

    /// One page (1-based) of items, most uncertain first, ties by record id.
    pub fn list(&self, status: Option<Status>, page: usize, page_size: usize) -> Result<Page, ReviewError> {
        if page == 0 {
            return Err(ReviewError::InvalidRequest("page starts at 1".into()));
        }
        if page_size == 0 || page_size > MAX_PAGE_SIZE {
            return Err(ReviewError::InvalidRequest(format!(
                "page_size must lie in 1..={MAX_PAGE_SIZE}"
            )));
        }
        let state = self.read();
        let mut matching: Vec<&ReviewItem> = state
            .items
            .values()
            .filter(|i| status.is_none_or(|s| i.status == s))
            .collect();
        matching.sort_by(|a, b| {
            b.normalized_entropy
                .total_cmp(&a.normalized_entropy)
                .then_with(|| a.record_id.cmp(&b.record_id))
        });
        let total = matching.len();
        let items = matching
            .into_iter()
            .skip((page - 1).saturating_mul(page_size))
            .take(page_size)
            .cloned()
            .collect();
        Ok(Page {
            items,
            page,
            page_size,
            total,
            counts: counts(&state),
        })
    }

    pub fn get(&self, record_id: &str) -> Result<ReviewItem, ReviewError> {
        self.read()
            .items
            .get(record_id)
            .cloned()
            .ok_or_else(|| ReviewError::NotFound(record_id.to_string()))
    }

    /// Records a reviewer's decision. Codes are checked against the item's
    /// terminology and stored at its target level.
    pub fn adjudicate(
        &self,
        record_id: &str,
        verdict: Verdict,
        reviewer: Option<String>,
    ) -> Result<ReviewItem, ReviewError> {
        let mut state = self.write();
        let item = state
            .items
            .get(record_id)
            .ok_or_else(|| ReviewError::NotFound(record_id.to_string()))?;
        if item.status == Status::Adjudicated {
            return Err(ReviewError::AlreadyAdjudicated(record_id.to_string()));
        }
        let (code, unmappable) = match verdict {
            Verdict::Unmappable => (None, true),
            Verdict::Code(raw) => (Some(self.check_code(&raw, &item.system, &item.level)?), false),
        };
        self.commit(
            &mut state,
            Event::Adjudicate {
                record_id: record_id.to_string(),
                code,
                unmappable,
                reviewer,
                at: now(),
            },
        )?;
        Ok(state.items[record_id].clone())
    }

    fn check_code(&self, raw: &str, system: &str, level: &str) -> Result<String, ReviewError> {
        let invalid = |reason: String| ReviewError::InvalidCode {
            code: raw.to_string(),
            reason,
        };
        let code = normalize_code(raw);
        if !is_valid_code_syntax(&code) {
            return Err(invalid("not a code".into()));
        }
        let terminology = self
            .terminologies
            .get(system)
            .ok_or_else(|| invalid(format!("no terminology loaded for {system}")))?;
        terminology
            .resolve_at_level(&code, level)
            .map_err(|e| invalid(e.to_string()))
    }

    /// Sets a pending item aside. Skipped items can still be adjudicated.
    pub fn skip(&self, record_id: &str, reviewer: Option<String>) -> Result<ReviewItem, ReviewError> {
        let mut state = self.write();
        let item = state
            .items
            .get(record_id)
            .ok_or_else(|| ReviewError::NotFound(record_id.to_string()))?;
        match item.status {
            Status::Adjudicated => return Err(ReviewError::AlreadyAdjudicated(record_id.to_string())),
            Status::Skipped => return Ok(item.clone()),
            Status::Pending => {}
        }
        self.commit(
            &mut state,
            Event::Skip {
                record_id: record_id.to_string(),
                reviewer,
                at: now(),
            },
        )?;
        Ok(state.items[record_id].clone())
    }

    /// Every enqueued decision in arrival order, with adjudications merged.
    pub fn export_records(&self) -> Vec<DecisionRecord> {
        let state = self.read();
        state
            .records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if let Some(item) = state.items.get(r.record_id()) {
                    if item.status == Status::Adjudicated {
                        r.adjudicated_code = item.adjudicated_code.clone();
                        r.adjudicated_unmappable = item.unmappable;
                    }
                }
                r
            })
            .collect()
    }

    /// Writes [`ReviewQueue::export_records`] as JSON lines, replacing `path`
    /// atomically. Returns the number of records written.
    pub fn export_to(&self, path: impl AsRef<Path>) -> Result<usize, ReviewError> {
        let path = path.as_ref();
        let records = self.export_records();
        let io = |e: std::io::Error| ReviewError::Io(format!("{}: {e}", path.display()));
        let tmp = path.with_extension("tmp-export");
        let file = File::create(&tmp).map_err(io)?;
        write_jsonl(std::io::BufWriter::new(file), &records)
            .map_err(|e| ReviewError::Io(format!("{}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(io)?;
        Ok(records.len())
    }
}

fn by_system(terminologies: Vec<Arc<Terminology>>) -> BTreeMap<String, Arc<Terminology>> {
    terminologies
        .into_iter()
        .map(|t| (t.system_id().to_string(), t))
        .collect()
}

fn counts(state: &State) -> Counts {
    let mut c = Counts::default();
    for item in state.items.values() {
        match item.status {
            Status::Pending => c.pending += 1,
            Status::Adjudicated => c.adjudicated += 1,
            Status::Skipped => c.skipped += 1,
        }
    }
    c
}

fn apply(state: &mut State, event: Event, terminologies: &BTreeMap<String, Arc<Terminology>>) {
    match event {
        Event::Enqueue { records, deferred } => {
            for r in records {
                if state.index.contains_key(r.record_id()) {
                    continue;
                }
                state.index.insert(r.record_id().to_string(), state.records.len());
                state.records.push(r);
            }
            for id in deferred {
                let Some(&i) = state.index.get(&id) else {
                    log::warn!("journal defers unknown record {id}");
                    continue;
                };
                let record = &state.records[i];
                let terminology = terminologies.get(&record.query.target_system).map(|t| t.as_ref());
                state
                    .items
                    .entry(id)
                    .or_insert_with(|| ReviewItem::from_decision(record, terminology));
            }
        }
        Event::Adjudicate {
            record_id,
            code,
            unmappable,
            reviewer,
            at,
        } => {
            if let Some(item) = state.items.get_mut(&record_id) {
                if item.status != Status::Adjudicated {
                    item.status = Status::Adjudicated;
                    item.adjudicated_code = code;
                    item.unmappable = unmappable;
                    item.reviewer = reviewer;
                    item.adjudicated_at = Some(at);
                }
            }
        }
        Event::Skip {
            record_id,
            reviewer,
            at: _,
        } => {
            if let Some(item) = state.items.get_mut(&record_id) {
                if item.status == Status::Pending {
                    item.status = Status::Skipped;
                    item.reviewer = reviewer;
                }
            }
        }
    }
}
