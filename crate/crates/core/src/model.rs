//! Shared domain types: participants, messages, the append-only chat
//! history, survey questions and the session clock.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Name of a participant, unique within one experiment. Comparison is exact.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PersonId(String);

impl PersonId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PersonId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PersonId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Who a participant is: name, background story, the config class tag and
/// whatever class-specific fields the config carried (opinion, model ids...).
#[derive(Debug, Clone, PartialEq)]
pub struct PersonProfile {
    pub id: PersonId,
    pub background_story: String,
    pub role_class: String,
    pub extra: BTreeMap<String, Value>,
}

impl PersonProfile {
    pub fn extra_str(&self, key: &str) -> Option<&str> {
        self.extra.get(key).and_then(Value::as_str)
    }
}

/// One utterance in the shared history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    /// Granted-turn index at which the message was produced.
    pub turn: u64,
    /// Position in the history.
    pub seq: u64,
    pub sender: PersonId,
    pub content: String,
    /// Session-clock milliseconds since session start.
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvariantViolation {
    #[error("message seq {got} does not match history length {expected}")]
    SeqMismatch { expected: u64, got: u64 },
    #[error("message time {got} ms precedes previous message at {previous} ms")]
    TimeRegression { previous: u64, got: u64 },
    #[error("message turn {got} precedes previous message turn {previous}")]
    TurnRegression { previous: u64, got: u64 },
    #[error("message content is empty")]
    EmptyContent,
}

/// Append-only list of messages. Survey exchanges and skips never enter it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChatHistory {
    messages: Vec<Message>,
}

/// One rendered history line as seen by a participant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    pub sender: String,
    pub content: String,
}

impl ChatHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn last(&self) -> Option<&Message> {
        self.messages.last()
    }

    /// Appends `msg`, rejecting anything that would break the history's
    /// ordering invariants. A rejection means the caller has a bug.
    pub fn append(&mut self, msg: Message) -> Result<(), InvariantViolation> {
        let expected = self.messages.len() as u64;
        if msg.seq != expected {
            return Err(InvariantViolation::SeqMismatch {
                expected,
                got: msg.seq,
            });
        }
        if let Some(last) = self.messages.last() {
            if msg.at_ms < last.at_ms {
                return Err(InvariantViolation::TimeRegression {
                    previous: last.at_ms,
                    got: msg.at_ms,
                });
            }
            if msg.turn < last.turn {
                return Err(InvariantViolation::TurnRegression {
                    previous: last.turn,
                    got: msg.turn,
                });
            }
        }
        if msg.content.trim().is_empty() {
            return Err(InvariantViolation::EmptyContent);
        }
        self.messages.push(msg);
        Ok(())
    }

    /// The history as `viewer` sees it. Every viewer currently gets the same
    /// view, own messages included and labeled by name like everyone else's.
    pub fn visible_history(&self, _viewer: &PersonId) -> Vec<HistoryEntry> {
        self.messages
            .iter()
            .map(|m| HistoryEntry {
                sender: m.sender.to_string(),
                content: m.content.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerKind {
    FreeText,
    IntegerScale { min: i64, max: i64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurveyQuestion {
    pub id: String,
    pub prompt: String,
    pub answer_kind: AnswerKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyAnswer {
    pub person: PersonId,
    pub question_id: String,
    pub phase_label: String,
    pub raw: String,
    pub parsed_value: Option<i64>,
    /// The parsed integer was outside the scale and got clamped.
    #[serde(default)]
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    /// Time advances by `tick` per granted turn.
    Virtual { tick: Duration },
    /// Time is read from the monotonic wall clock.
    Wall,
}

/// Session time source.
#[derive(Debug, Clone)]
pub struct ClockState {
    mode: ClockMode,
    start: Instant,
    elapsed: Duration,
    limit: Option<Duration>,
}

/// Immutable view of the clock handed to participants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockSnapshot {
    pub elapsed_ms: u64,
    pub limit_ms: Option<u64>,
    pub remaining_ms: Option<u64>,
}

impl ClockState {
    pub fn new(mode: ClockMode, limit: Option<Duration>) -> Self {
        Self {
            mode,
            start: Instant::now(),
            elapsed: Duration::ZERO,
            limit,
        }
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn limit(&self) -> Option<Duration> {
        self.limit
    }

    pub fn start(&self) -> Instant {
        self.start
    }

    /// Elapsed session time. In wall mode this samples the clock.
    pub fn elapsed(&mut self) -> Duration {
        if self.mode == ClockMode::Wall {
            let now = self.start.elapsed();
            if now > self.elapsed {
                self.elapsed = now;
            }
        }
        self.elapsed
    }

    pub fn elapsed_ms(&mut self) -> u64 {
        self.elapsed().as_millis() as u64
    }

    pub fn remaining(&mut self) -> Option<Duration> {
        let elapsed = self.elapsed();
        self.limit.map(|l| l.saturating_sub(elapsed))
    }

    /// Called once per granted turn.
    pub fn advance_turn(&mut self) {
        if let ClockMode::Virtual { tick } = self.mode {
            self.elapsed += tick;
        }
    }

    pub fn snapshot(&mut self) -> ClockSnapshot {
        let elapsed_ms = self.elapsed_ms();
        let limit_ms = self.limit.map(|l| l.as_millis() as u64);
        ClockSnapshot {
            elapsed_ms,
            limit_ms,
            remaining_ms: limit_ms.map(|l| l.saturating_sub(elapsed_ms)),
        }
    }
}
