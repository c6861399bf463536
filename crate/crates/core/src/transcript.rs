//! Append-only event log. One canonical JSON record per line; a session's
//! file starts with `session_start` and, when complete, ends with
//! `session_end`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::canonical::to_canonical_string;
use crate::config::ExperimentConfig;
use crate::model::{ChatHistory, Message, PersonId, SurveyAnswer};
use crate::participants::SkipReason;

pub const TRANSCRIPT_EXTENSION: &str = ".events.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    SessionStart,
    Message,
    Skip,
    SurveyAnswer,
    SuppressedDraft,
    SessionEnd,
}

impl EventKind {
    pub const ALL: [EventKind; 6] = [
        EventKind::SessionStart,
        EventKind::Message,
        EventKind::Skip,
        EventKind::SurveyAnswer,
        EventKind::SuppressedDraft,
        EventKind::SessionEnd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::SessionStart => "session_start",
            EventKind::Message => "message",
            EventKind::Skip => "skip",
            EventKind::SurveyAnswer => "survey_answer",
            EventKind::SuppressedDraft => "suppressed_draft",
            EventKind::SessionEnd => "session_end",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub seq: u64,
    pub kind: EventKind,
    pub at_ms: u64,
    pub payload: Map<String, Value>,
    pub run_id: String,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: ordering violation: {message}")]
    Ordering { line: usize, message: String },
    #[error("transcript config hash {found} does not match expected {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("record seq {got} written after {expected} records")]
    SeqOutOfOrder { expected: u64, got: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl EventRecord {
    pub fn to_value(&self) -> Value {
        json!({
            "seq": self.seq,
            "kind": self.kind.as_str(),
            "at_ms": self.at_ms,
            "payload": Value::Object(self.payload.clone()),
            "run_id": self.run_id,
        })
    }

    /// Canonical single-line form, without the trailing LF.
    pub fn to_line(&self) -> String {
        to_canonical_string(&self.to_value())
    }

    pub fn from_line(line: &str, line_no: usize) -> Result<Self, TranscriptError> {
        let malformed = |message: String| TranscriptError::Malformed { line: line_no, message };
        let value: Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| malformed("not an object".into()))?;
        for key in obj.keys() {
            if !matches!(key.as_str(), "seq" | "kind" | "at_ms" | "payload" | "run_id") {
                return Err(malformed(format!("unexpected key {key:?}")));
            }
        }
        let field = |k: &str| obj.get(k).ok_or_else(|| malformed(format!("missing {k:?}")));
        let seq = field("seq")?
            .as_u64()
            .ok_or_else(|| malformed("seq is not an unsigned integer".into()))?;
        let kind_str = field("kind")?
            .as_str()
            .ok_or_else(|| malformed("kind is not a string".into()))?;
        let kind = EventKind::parse(kind_str).ok_or_else(|| malformed(format!("unknown kind {kind_str:?}")))?;
        let at_ms = field("at_ms")?
            .as_u64()
            .ok_or_else(|| malformed("at_ms is not an unsigned integer".into()))?;
        let payload = field("payload")?
            .as_object()
            .ok_or_else(|| malformed("payload is not an object".into()))?
            .clone();
        let run_id = field("run_id")?
            .as_str()
            .ok_or_else(|| malformed("run_id is not a string".into()))?
            .to_string();
        Ok(Self {
            seq,
            kind,
            at_ms,
            payload,
            run_id,
        })
    }
}

/// Receives every event of a session in seq order.
pub trait EventSink: Send {
    fn write_event(&mut self, record: &EventRecord) -> Result<(), TranscriptError>;
}

/// Writes canonical lines to any `Write`, checking seq continuity.
pub struct JsonlSink<W: Write + Send> {
    out: W,
    written: u64,
}

impl JsonlSink<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        Ok(Self::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write + Send> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        Self { out, written: 0 }
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write + Send> EventSink for JsonlSink<W> {
    fn write_event(&mut self, record: &EventRecord) -> Result<(), TranscriptError> {
        if record.seq != self.written {
            return Err(TranscriptError::SeqOutOfOrder {
                expected: self.written,
                got: record.seq,
            });
        }
        let mut line = record.to_line();
        line.push('\n');
        self.out.write_all(line.as_bytes())?;
        // keep the on-disk log usable for tailing and after crashes
        self.out.flush()?;
        self.written += 1;
        Ok(())
    }
}

/// Collects events in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub events: Vec<EventRecord>,
}

impl EventSink for MemorySink {
    fn write_event(&mut self, record: &EventRecord) -> Result<(), TranscriptError> {
        self.events.push(record.clone());
        Ok(())
    }
}

impl<S: EventSink + ?Sized> EventSink for Box<S> {
    fn write_event(&mut self, record: &EventRecord) -> Result<(), TranscriptError> {
        (**self).write_event(record)
    }
}

/// Serializes a whole event list to canonical text.
pub fn events_to_string(events: &[EventRecord]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&e.to_line());
        s.push('\n');
    }
    s
}

/// Parses an event file, checking seq density and time monotonicity. A
/// final line without its newline that does not parse is a torn write and
/// is dropped.
pub fn read_events(mut source: impl BufRead) -> Result<Vec<EventRecord>, TranscriptError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let torn_tail = !text.is_empty() && !text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut events: Vec<EventRecord> = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let line_no = i + 1;
        if line.is_empty() {
            return Err(TranscriptError::Malformed {
                line: line_no,
                message: "empty line".into(),
            });
        }
        let record = match EventRecord::from_line(line, line_no) {
            Ok(r) => r,
            Err(e) if torn_tail && line_no == lines.len() => {
                tracing::warn!(line = line_no, error = %e, "dropping torn final line");
                break;
            }
            Err(e) => return Err(e),
        };
        let ordering = |message: String| TranscriptError::Ordering { line: line_no, message };
        if record.seq != events.len() as u64 {
            return Err(ordering(format!("expected seq {}, found {}", events.len(), record.seq)));
        }
        if let Some(prev) = events.last() {
            if record.at_ms < prev.at_ms {
                return Err(ordering(format!(
                    "at_ms {} precedes previous {}",
                    record.at_ms, prev.at_ms
                )));
            }
            if prev.kind == EventKind::SessionEnd {
                return Err(ordering("record after session_end".into()));
            }
        }
        match (events.is_empty(), record.kind) {
            (true, k) if k != EventKind::SessionStart => {
                return Err(ordering("first record is not session_start".into()));
            }
            (false, EventKind::SessionStart) => {
                return Err(ordering("second session_start".into()));
            }
            _ => {}
        }
        events.push(record);
    }
    Ok(events)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipRecord {
    pub turn: u64,
    pub person: PersonId,
    pub reason: SkipReason,
    pub at_ms: u64,
}

/// A session reconstructed from its event file.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptView {
    pub run_id: String,
    pub config_hash: Option<String>,
    pub config_document: Option<Value>,
    pub history: ChatHistory,
    pub survey_answers: Vec<SurveyAnswer>,
    pub skips: Vec<SkipRecord>,
    pub suppressed_drafts: Vec<(PersonId, String)>,
    pub end_reason: Option<String>,
    /// False when the file has no `session_end`.
    pub complete: bool,
    pub events: Vec<EventRecord>,
}

impl TranscriptView {
    /// Skip counts per person and reason.
    pub fn skip_stats(&self) -> BTreeMap<PersonId, BTreeMap<SkipReason, usize>> {
        let mut stats: BTreeMap<PersonId, BTreeMap<SkipReason, usize>> = BTreeMap::new();
        for s in &self.skips {
            *stats.entry(s.person.clone()).or_default().entry(s.reason).or_default() += 1;
        }
        stats
    }
}

fn payload_str(rec: &EventRecord, key: &str, line: usize) -> Result<String, TranscriptError> {
    rec.payload
        .get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| TranscriptError::Malformed {
            line,
            message: format!("{} payload lacks string {key:?}", rec.kind.as_str()),
        })
}

fn payload_u64(rec: &EventRecord, key: &str, line: usize) -> Result<u64, TranscriptError> {
    rec.payload
        .get(key)
        .and_then(Value::as_u64)
        .ok_or_else(|| TranscriptError::Malformed {
            line,
            message: format!("{} payload lacks integer {key:?}", rec.kind.as_str()),
        })
}

/// Loads a transcript. When `expected` is given, the file's config hash
/// must match it.
pub fn load_transcript(
    source: impl BufRead,
    expected: Option<&ExperimentConfig>,
) -> Result<TranscriptView, TranscriptError> {
    let events = read_events(source)?;
    let mut view = TranscriptView {
        run_id: String::new(),
        config_hash: None,
        config_document: None,
        history: ChatHistory::new(),
        survey_answers: Vec::new(),
        skips: Vec::new(),
        suppressed_drafts: Vec::new(),
        end_reason: None,
        complete: false,
        events: Vec::new(),
    };
    for (i, rec) in events.iter().enumerate() {
        let line = i + 1;
        match rec.kind {
            EventKind::SessionStart => {
                view.run_id = rec.run_id.clone();
                view.config_hash = rec.payload.get("config_hash").and_then(Value::as_str).map(str::to_string);
                view.config_document = rec.payload.get("config").cloned();
            }
            EventKind::Message => {
                let msg = Message {
                    turn: payload_u64(rec, "turn", line)?,
                    seq: payload_u64(rec, "msg_seq", line)?,
                    sender: PersonId::new(payload_str(rec, "person", line)?),
                    content: payload_str(rec, "content", line)?,
                    at_ms: rec.at_ms,
                };
                view.history.append(msg).map_err(|e| TranscriptError::Ordering {
                    line,
                    message: e.to_string(),
                })?;
            }
            EventKind::Skip => {
                let reason_str = payload_str(rec, "reason", line)?;
                let reason = SkipReason::parse(&reason_str).ok_or_else(|| TranscriptError::Malformed {
                    line,
                    message: format!("unknown skip reason {reason_str:?}"),
                })?;
                view.skips.push(SkipRecord {
                    turn: payload_u64(rec, "turn", line)?,
                    person: PersonId::new(payload_str(rec, "person", line)?),
                    reason,
                    at_ms: rec.at_ms,
                });
            }
            EventKind::SurveyAnswer => {
                view.survey_answers.push(SurveyAnswer {
                    person: PersonId::new(payload_str(rec, "person", line)?),
                    question_id: payload_str(rec, "question_id", line)?,
                    phase_label: payload_str(rec, "phase", line)?,
                    raw: payload_str(rec, "raw", line)?,
                    parsed_value: rec.payload.get("value").and_then(Value::as_i64),
                    clamped: rec.payload.get("clamped").and_then(Value::as_bool).unwrap_or(false),
                });
            }
            EventKind::SuppressedDraft => {
                view.suppressed_drafts.push((
                    PersonId::new(payload_str(rec, "person", line)?),
                    payload_str(rec, "content", line)?,
                ));
            }
            EventKind::SessionEnd => {
                view.end_reason = Some(payload_str(rec, "reason", line)?);
                view.complete = true;
            }
        }
    }
    if let Some(config) = expected {
        let expected_hash = config.hash();
        let found = view.config_hash.clone().unwrap_or_default();
        if found != expected_hash {
            return Err(TranscriptError::ConfigMismatch {
                expected: expected_hash,
                found,
            });
        }
    }
    view.events = events;
    Ok(view)
}

pub fn load_transcript_file(path: impl AsRef<Path>, expected: Option<&ExperimentConfig>) -> Result<TranscriptView, TranscriptError> {
    let file = File::open(path)?;
    load_transcript(io::BufReader::new(file), expected)
}
