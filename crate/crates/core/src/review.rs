//! Review store behind the annotation service: queue, optimistic-version
//! review submission, consensus at quorum, agreement statistics and an
//! append-only event log that replays to the same state.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agreement::{cohen_kappa, fleiss_kappa, resolve_consensus, ConsensusOutcome, ConsensusStatus, RatingMatrix, Review};
use crate::corpus::{AnnotationRecord, Evidence, FlagResult, RecordStatus, FLAGS_FILE, JSONL_FILE};
use crate::error::{Error, Result};
use crate::formats::{align_spans, emit_conll_records, emit_jsonl, parse_jsonl};
use crate::text::{tokenize_str, Vocabulary};

pub const DEFAULT_QUORUM: usize = 4;
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

/// Character range of the text that a lexicon hit covers. Offsets count
/// Unicode scalar values, end exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Highlight {
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub term: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewQueueItem {
    pub record: AnnotationRecord,
    pub evidence: FlagResult,
    pub highlights: Vec<Highlight>,
    pub reviews_so_far: Vec<Review>,
    /// Number of accepted mutations of this record.
    pub version: u64,
    pub outcome: Option<ConsensusOutcome>,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Review {
        review: Review,
    },
    Transition {
        record_id: String,
        from: RecordStatus,
        to: RecordStatus,
        version: u64,
        note: String,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("unknown record {0}")]
    NotFound(String),
    #[error("{reason}")]
    Conflict {
        reason: String,
        current: Box<ReviewQueueItem>,
    },
    #[error("invalid review: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmitOutcome {
    pub item: ReviewQueueItem,
    pub outcome: Option<ConsensusOutcome>,
    #[serde(skip)]
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAgreement {
    pub reviewer_a: String,
    pub reviewer_b: String,
    pub items: usize,
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub finalized: usize,
    pub pairs: Vec<PairAgreement>,
    /// Records entering the Fleiss computation: finalized records rated by
    /// exactly `quorum` reviewers.
    pub fleiss_items: usize,
    pub fleiss_kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub quorum: usize,
    pub items: Vec<ReviewQueueItem>,
}

/// Statuses listed by the queue when no filter is given.
pub const DEFAULT_QUEUE: [RecordStatus; 2] = [RecordStatus::AutoFlagged, RecordStatus::UnderReview];

/// Parses a comma-separated status filter. `None` or an empty string gives
/// the default queue.
pub fn parse_status_filter(filter: Option<&str>) -> Result<Vec<RecordStatus>> {
    let Some(f) = filter.map(str::trim).filter(|f| !f.is_empty()) else {
        return Ok(DEFAULT_QUEUE.to_vec());
    };
    f.split(',')
        .map(|s| {
            let s = s.trim();
            RecordStatus::parse(s).ok_or_else(|| Error::invalid(format!("unknown status {s:?}")))
        })
        .collect()
}

fn highlights(record: &AnnotationRecord, flag: &FlagResult) -> Vec<Highlight> {
    let text = &record.biased_text;
    let tokens = tokenize_str(text, &Vocabulary::default());
    let chars = |byte: usize| text[..byte].chars().count();
    flag.lexicon_hits
        .iter()
        .filter(|h| h.token_start < h.token_end && h.token_end <= tokens.len())
        .map(|h| {
            let (bs, be) = (tokens.offsets[h.token_start].0, tokens.offsets[h.token_end - 1].1);
            Highlight {
                start: chars(bs),
                end: chars(be),
                text: text[bs..be].to_string(),
                term: h.matched_term.clone(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewStore {
    quorum: usize,
    items: Vec<ReviewQueueItem>,
    index: HashMap<String, usize>,
}

impl ReviewStore {
    /// Builds a store in corpus order. Records without a flag result get an
    /// empty one.
    pub fn new(records: Vec<AnnotationRecord>, flags: Vec<FlagResult>, quorum: usize) -> Result<Self> {
        if quorum == 0 {
            return Err(Error::invalid("quorum must be at least 1"));
        }
        let mut by_id: HashMap<String, FlagResult> = flags.into_iter().map(|f| (f.record_id.clone(), f)).collect();
        let mut items = Vec::with_capacity(records.len());
        let mut index = HashMap::new();
        for record in records {
            record.validate()?;
            if index.insert(record.record_id.clone(), items.len()).is_some() {
                return Err(Error::invalid(format!("duplicate record id {}", record.record_id)));
            }
            let evidence = by_id.remove(&record.record_id).unwrap_or_else(|| FlagResult {
                record_id: record.record_id.clone(),
                flagged: record.status == RecordStatus::AutoFlagged,
                lexicon_hits: Vec::new(),
                rule_hits: Vec::new(),
                candidate_dimension: None,
            });
            items.push(ReviewQueueItem {
                highlights: highlights(&record, &evidence),
                record,
                evidence,
                reviews_so_far: Vec::new(),
                version: 0,
                outcome: None,
            });
        }
        Ok(Self { quorum, items, index })
    }

    /// Rebuilds state by applying a logged event sequence to a fresh store.
    /// Transition events must match the ones the reviews produce.
    pub fn replay(mut self, events: &[Event]) -> Result<Self> {
        let mut expected: std::collections::VecDeque<Event> = Default::default();
        for (i, ev) in events.iter().enumerate() {
            let line = i + 1;
            match ev {
                Event::Review { review } => {
                    if !expected.is_empty() {
                        return Err(Error::Parse {
                            line,
                            message: "missing transition event".into(),
                        });
                    }
                    let out = self.submit(review.clone()).map_err(|e| Error::Parse {
                        line,
                        message: format!("review does not replay: {e}"),
                    })?;
                    expected.extend(out.events.into_iter().skip(1));
                }
                Event::Transition { .. } => {
                    if expected.pop_front().as_ref() != Some(ev) {
                        return Err(Error::Parse {
                            line,
                            message: "transition does not match the replayed state".into(),
                        });
                    }
                }
            }
        }
        if !expected.is_empty() {
            return Err(Error::invalid("event log ends before a transition was recorded"));
        }
        Ok(self)
    }

    pub fn quorum(&self) -> usize {
        self.quorum
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ReviewQueueItem] {
        &self.items
    }

    pub fn get(&self, record_id: &str) -> Option<&ReviewQueueItem> {
        self.index.get(record_id).map(|&i| &self.items[i])
    }

    /// Items whose status is in `statuses`, in corpus order.
    pub fn queue(&self, statuses: &[RecordStatus]) -> Vec<&ReviewQueueItem> {
        self.items.iter().filter(|it| statuses.contains(&it.record.status)).collect()
    }

    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.items.iter().map(|it| it.record.clone()).collect()
    }

    /// Appends `review` if it was made against the record's current version.
    /// On reaching quorum the record is finalized or disputed.
    pub fn submit(&mut self, review: Review) -> Result<SubmitOutcome, ReviewError> {
        let &idx = self
            .index
            .get(&review.record_id)
            .ok_or_else(|| ReviewError::NotFound(review.record_id.clone()))?;
        let quorum = self.quorum;
        let item = &mut self.items[idx];
        review.validate().map_err(|e| ReviewError::Invalid(e.to_string()))?;
        let status = item.record.status;
        if matches!(status, RecordStatus::Finalized | RecordStatus::Clean) {
            return Err(ReviewError::Conflict {
                reason: format!("record {} is {} and takes no reviews", review.record_id, status.as_str()),
                current: Box::new(item.clone()),
            });
        }
        if review.version != item.version {
            return Err(ReviewError::Conflict {
                reason: format!(
                    "stale version {} for record {}; current version is {}",
                    review.version, review.record_id, item.version
                ),
                current: Box::new(item.clone()),
            });
        }
        let tokens = tokenize_str(&item.record.biased_text, &Vocabulary::default());
        align_spans(&item.record.biased_text, &tokens, &review.spans).map_err(|e| ReviewError::Invalid(e.to_string()))?;
        if status == RecordStatus::Disputed && review.note.trim().is_empty() {
            return Err(ReviewError::Invalid("reviews of a disputed record need a note".into()));
        }

        item.reviews_so_far.push(review.clone());
        item.version += 1;
        let version = item.version;
        let mut events = vec![Event::Review { review }];
        let mut move_to = |item: &mut ReviewQueueItem, to: RecordStatus, note: &str| {
            let from = item.record.status;
            debug_assert!(from.can_transition(to));
            item.record.status = to;
            events.push(Event::Transition {
                record_id: item.record.record_id.clone(),
                from,
                to,
                version,
                note: note.to_string(),
            });
        };
        if status == RecordStatus::AutoFlagged {
            move_to(item, RecordStatus::UnderReview, "");
        }

        let outcome = resolve_consensus(&item.reviews_so_far, quorum).map_err(|e| ReviewError::Invalid(e.to_string()))?;
        let outcome = outcome.map(|mut o| {
            let spans = if o.final_spans.is_empty() {
                item.record.identified_biased_spans.clone()
            } else {
                o.final_spans.clone()
            };
            if o.status == ConsensusStatus::Finalized && o.final_label == Some(true) && spans.is_empty() {
                o.status = ConsensusStatus::Disputed;
                o.note = format!("majority says biased but no spans were given; {}", o.note);
            }
            match o.status {
                ConsensusStatus::Finalized => {
                    let label = o.final_label == Some(true);
                    item.record.bias_label = label;
                    item.record.identified_biased_spans = if label { spans } else { Vec::new() };
                    item.record.bias_dimension = if label {
                        o.final_dimension.clone().or(item.record.bias_dimension.clone())
                    } else {
                        None
                    };
                    if !item.record.provenance.contains(&Evidence::Manual) {
                        item.record.provenance.push(Evidence::Manual);
                    }
                    o.final_spans = item.record.identified_biased_spans.clone();
                    o.final_dimension = item.record.bias_dimension.clone();
                    move_to(item, RecordStatus::Finalized, &o.note);
                }
                ConsensusStatus::Disputed => {
                    if item.record.status != RecordStatus::Disputed {
                        move_to(item, RecordStatus::Disputed, &o.note);
                    }
                }
            }
            item.outcome = Some(o.clone());
            o
        });
        Ok(SubmitOutcome {
            item: item.clone(),
            outcome,
            events,
        })
    }

    /// Puts back an item read before a submission, undoing that submission
    /// when it could not be persisted.
    pub fn restore(&mut self, item: ReviewQueueItem) -> Result<()> {
        let &idx = self
            .index
            .get(&item.record.record_id)
            .ok_or_else(|| Error::invalid(format!("unknown record {}", item.record.record_id)))?;
        self.items[idx] = item;
        Ok(())
    }

    /// Pairwise Cohen's kappa over the finalized records each pair both
    /// rated, and Fleiss' kappa over finalized records with exactly
    /// `quorum` raters. Labels come from each reviewer's latest review.
    pub fn agreement(&self) -> AgreementStats {
        let finalized: Vec<BTreeMap<&str, bool>> = self
            .items
            .iter()
            .filter(|it| it.record.status == RecordStatus::Finalized && !it.reviews_so_far.is_empty())
            .map(|it| {
                let mut latest: BTreeMap<&str, &Review> = BTreeMap::new();
                for r in &it.reviews_so_far {
                    latest.insert(&r.reviewer_id, r);
                }
                latest.into_iter().map(|(k, r)| (k, r.decision.label())).collect()
            })
            .collect();
        let mut reviewers: Vec<&str> = finalized.iter().flat_map(|m| m.keys().copied()).collect();
        reviewers.sort_unstable();
        reviewers.dedup();

        let mut pairs = Vec::new();
        for (i, a) in reviewers.iter().enumerate() {
            for b in &reviewers[i + 1..] {
                let (la, lb): (Vec<bool>, Vec<bool>) = finalized
                    .iter()
                    .filter_map(|m| Some((*m.get(a)?, *m.get(b)?)))
                    .unzip();
                let kappa = if la.is_empty() { None } else { cohen_kappa(&la, &lb).ok() };
                pairs.push(PairAgreement {
                    reviewer_a: a.to_string(),
                    reviewer_b: b.to_string(),
                    items: la.len(),
                    kappa,
                });
            }
        }

        let rows: Vec<Vec<bool>> = finalized
            .iter()
            .filter(|m| m.len() == self.quorum)
            .map(|m| m.values().copied().collect())
            .collect();
        let fleiss = if rows.is_empty() {
            None
        } else {
            RatingMatrix::from_labels(&rows).and_then(|m| fleiss_kappa(&m)).ok()
        };
        AgreementStats {
            finalized: finalized.len(),
            pairs,
            fleiss_items: rows.len(),
            fleiss_kappa: fleiss,
        }
    }

    pub fn export_jsonl(&self) -> String {
        emit_jsonl(&self.records())
    }

    pub fn export_conll(&self) -> Result<String> {
        emit_conll_records(&self.records())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            quorum: self.quorum,
            items: self.items.clone(),
        }
    }
}

/// Append-only JSONL event log.
pub struct EventLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl EventLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes and flushes `events`, one JSON object per line.
    pub fn append(&mut self, events: &[Event]) -> Result<()> {
        for ev in events {
            serde_json::to_writer(&mut self.out, ev)?;
            self.out.write_all(b"\n")?;
        }
        self.out.flush()?;
        self.out.get_ref().sync_data()?;
        Ok(())
    }
}

pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Loads the corpus in `dir` (records plus flag evidence when present) and
/// replays the directory's event log on top.
pub fn open_store(dir: &Path, quorum: usize) -> Result<ReviewStore> {
    let records = parse_jsonl(&fs::read_to_string(dir.join(JSONL_FILE))?)?;
    let flags_path = dir.join(FLAGS_FILE);
    let flags = if flags_path.exists() {
        fs::read_to_string(&flags_path)?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<FlagResult>>>()?
    } else {
        Vec::new()
    };
    ReviewStore::new(records, flags, quorum)?.replay(&read_events(&dir.join(EVENTS_FILE))?)
}

pub fn write_snapshot(path: &Path, store: &ReviewStore) -> Result<()> {
    let mut body = serde_json::to_string_pretty(&store.snapshot())?;
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}
