//! The session loop: check the end condition, grant a turn, record what
//! happened, advance the clock, run any survey that is due.

use std::sync::OnceLock;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use regex::Regex;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::config::{class, parse_stored_end, ClassSpec, ExperimentConfig, SurveyPhase};
use crate::host::{make_host, HostError, HostState};
use crate::model::{AnswerKind, ChatHistory, ClockState, InvariantViolation, Message, SurveyAnswer, SurveyQuestion};
use crate::participants::{Participant, SkipReason, TurnContext, TurnOutcome, PROMPT_TEMPLATE_VERSION};
use crate::transcript::{EventKind, EventRecord, EventSink, SkipRecord, TranscriptError};

/// run_id used in golden mode.
pub const GOLDEN_RUN_ID: &str = "00000000-0000-0000-0000-000000000000";
/// Lower bound of the turn cap added to configs that lack one.
pub const MIN_IMPLICIT_TURN_CAP: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EndReason {
    NumMsgs,
    TimeLimit,
    TurnCap,
}

impl EndReason {
    pub fn as_str(self) -> &'static str {
        match self {
            EndReason::NumMsgs => "num_msgs",
            EndReason::TimeLimit => "time_limit",
            EndReason::TurnCap => "turn_cap",
        }
    }
}

impl std::fmt::Display for EndReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndCondition {
    NumMsgs(u64),
    TimeLimit(Duration),
    TurnCap(u64),
    /// Ends on the first satisfied member, in order.
    AnyOf(Vec<EndCondition>),
}

impl EndCondition {
    /// Builds the configured condition. `time_limit` without its own limit
    /// takes the config's time limit.
    pub fn from_spec(spec: &ClassSpec, default_limit: Option<Duration>) -> Option<Self> {
        Some(match spec.class.as_str() {
            class::END_NUM_MSGS => EndCondition::NumMsgs(spec.u64_param("max_num_msgs")?),
            class::END_TIME_LIMIT => EndCondition::TimeLimit(
                spec.u64_param("limit_ms").map(Duration::from_millis).or(default_limit)?,
            ),
            class::END_TURN_CAP => EndCondition::TurnCap(spec.u64_param("max_turns")?),
            class::END_ANY_OF => EndCondition::AnyOf(
                spec.params
                    .get("conditions")?
                    .as_array()?
                    .iter()
                    .map(|v| parse_stored_end(v).and_then(|s| Self::from_spec(&s, default_limit)))
                    .collect::<Option<Vec<_>>>()?,
            ),
            _ => return None,
        })
    }

    /// The configured condition plus the anti-livelock turn cap when the
    /// config has none: `max(10 × max messages, 1000)` turns.
    pub fn for_config(config: &ExperimentConfig) -> Option<Self> {
        let base = Self::from_spec(&config.end, config.time_limit())?;
        if base.has_turn_cap() {
            return Some(base);
        }
        let cap = base
            .max_messages()
            .map_or(MIN_IMPLICIT_TURN_CAP, |m| m.saturating_mul(10).max(MIN_IMPLICIT_TURN_CAP));
        Some(EndCondition::AnyOf(vec![base, EndCondition::TurnCap(cap)]))
    }

    fn has_turn_cap(&self) -> bool {
        match self {
            EndCondition::TurnCap(_) => true,
            EndCondition::AnyOf(items) => items.iter().any(Self::has_turn_cap),
            _ => false,
        }
    }

    fn max_messages(&self) -> Option<u64> {
        match self {
            EndCondition::NumMsgs(m) => Some(*m),
            EndCondition::AnyOf(items) => items.iter().filter_map(Self::max_messages).max(),
            _ => None,
        }
    }

    pub fn check(&self, messages: usize, elapsed: Duration, turns: u64) -> Option<EndReason> {
        match self {
            EndCondition::NumMsgs(max) => (messages as u64 >= *max).then_some(EndReason::NumMsgs),
            EndCondition::TimeLimit(limit) => (elapsed >= *limit).then_some(EndReason::TimeLimit),
            EndCondition::TurnCap(max) => (turns >= *max).then_some(EndReason::TurnCap),
            EndCondition::AnyOf(items) => items.iter().find_map(|c| c.check(messages, elapsed, turns)),
        }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("host: {0}")]
    Host(#[from] HostError),
    #[error("end condition {0:?} cannot be built")]
    EndCondition(String),
    #[error("participants {got:?} do not match configured roster {expected:?}")]
    RosterMismatch { expected: Vec<String>, got: Vec<String> },
    #[error("event sink failed: {0}")]
    Sink(#[from] TranscriptError),
    #[error("history invariant violated: {0}")]
    Invariant(#[from] InvariantViolation),
    #[error("session is not running")]
    NotRunning,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub run_id: Option<String>,
    /// Zero the run id and wall-clock start so output is byte-comparable.
    pub golden: bool,
}

impl RunOptions {
    pub fn golden() -> Self {
        Self {
            run_id: None,
            golden: true,
        }
    }
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            run_id: None,
            golden: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionStatus {
    Created,
    Running,
    Ended(EndReason),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub run_id: String,
    pub history: ChatHistory,
    pub survey_answers: Vec<SurveyAnswer>,
    pub skips: Vec<SkipRecord>,
    pub end_reason: EndReason,
    pub event_count: u64,
    pub turn_count: u64,
    pub elapsed_ms: u64,
}

/// What one `iterate` call did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnRecord {
    pub turn: u64,
    pub person: String,
    pub outcome: TurnOutcome,
}

pub struct Session<'a> {
    config: &'a ExperimentConfig,
    persons: Vec<Box<dyn Participant>>,
    sink: &'a mut dyn EventSink,
    run_id: String,
    golden: bool,
    history: ChatHistory,
    host: HostState,
    clock: ClockState,
    end: EndCondition,
    turn_count: u64,
    events: u64,
    last_at_ms: u64,
    survey_answers: Vec<SurveyAnswer>,
    skips: Vec<SkipRecord>,
    status: SessionStatus,
}

impl<'a> Session<'a> {
    pub fn new(
        config: &'a ExperimentConfig,
        persons: Vec<Box<dyn Participant>>,
        sink: &'a mut dyn EventSink,
        options: RunOptions,
    ) -> Result<Self, SessionError> {
        let roster = config.roster();
        let got: Vec<String> = persons.iter().map(|p| p.profile().id.to_string()).collect();
        let expected: Vec<String> = roster.iter().map(ToString::to_string).collect();
        if got != expected {
            return Err(SessionError::RosterMismatch { expected, got });
        }
        let host = make_host(&config.host, roster, config.seed())?;
        let end = EndCondition::for_config(config).ok_or_else(|| SessionError::EndCondition(config.end.class.clone()))?;
        let run_id = match (options.golden, options.run_id) {
            (true, _) => GOLDEN_RUN_ID.to_string(),
            (false, Some(id)) => id,
            (false, None) => uuid::Uuid::new_v4().to_string(),
        };
        Ok(Self {
            config,
            persons,
            sink,
            run_id,
            golden: options.golden,
            history: ChatHistory::new(),
            host,
            clock: ClockState::new(config.clock_mode(), config.time_limit()),
            end,
            turn_count: 0,
            events: 0,
            last_at_ms: 0,
            survey_answers: Vec::new(),
            skips: Vec::new(),
            status: SessionStatus::Created,
        })
    }

    pub fn history(&self) -> &ChatHistory {
        &self.history
    }

    pub fn turn_count(&self) -> u64 {
        self.turn_count
    }

    pub fn event_count(&self) -> u64 {
        self.events
    }

    pub fn status(&self) -> &SessionStatus {
        &self.status
    }

    pub fn survey_answers(&self) -> &[SurveyAnswer] {
        &self.survey_answers
    }

    pub fn clock(&mut self) -> &mut ClockState {
        &mut self.clock
    }

    fn emit(&mut self, kind: EventKind, at_ms: u64, payload: Value) -> Result<(), SessionError> {
        let at_ms = at_ms.max(self.last_at_ms);
        let record = EventRecord {
            seq: self.events,
            kind,
            at_ms,
            payload: match payload {
                Value::Object(map) => map,
                _ => Map::new(),
            },
            run_id: self.run_id.clone(),
        };
        self.sink.write_event(&record)?;
        self.events += 1;
        self.last_at_ms = at_ms;
        Ok(())
    }

    /// Emits `session_start` and runs the pre-session survey.
    pub fn start(&mut self) -> Result<(), SessionError> {
        if self.status != SessionStatus::Created {
            return Err(SessionError::NotRunning);
        }
        let started_at = if self.golden {
            0
        } else {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0)
        };
        let payload = json!({
            "config": self.config.to_document(),
            "config_hash": self.config.hash(),
            "seed": self.config.seed(),
            "prompt_version": PROMPT_TEMPLATE_VERSION,
            "started_at_unix_ms": started_at,
            "persons": self.config.roster().iter().map(|p| p.as_str()).collect::<Vec<_>>(),
        });
        self.emit(EventKind::SessionStart, 0, payload)?;
        self.status = SessionStatus::Running;
        if self.survey_due(&SurveyPhase::Pre) {
            self.run_survey_phase("pre")?;
        }
        Ok(())
    }

    fn survey_due(&self, phase: &SurveyPhase) -> bool {
        self.config.survey.as_ref().is_some_and(|s| s.has_phase(phase))
    }

    /// Checks the end condition without side effects on the history.
    pub fn did_end(&mut self) -> Option<EndReason> {
        let elapsed = self.clock.elapsed();
        self.end.check(self.history.len(), elapsed, self.turn_count)
    }

    fn context_for(&mut self, idx: usize) -> TurnContext {
        let profile = self.persons[idx].profile().clone();
        TurnContext {
            scenario: self.config.scenario.clone(),
            history: self.history.visible_history(&profile.id),
            profile,
            clock: self.clock.snapshot(),
            turn: self.turn_count,
        }
    }

    /// Grants one turn.
    pub fn iterate(&mut self) -> Result<TurnRecord, SessionError> {
        if self.status != SessionStatus::Running {
            return Err(SessionError::NotRunning);
        }
        let idx = self.host.next_speaker();
        let ctx = self.context_for(idx);
        let person = ctx.profile.id.clone();
        let turn = self.turn_count;

        let (report, error) = match self.persons[idx].generate_answer(&ctx) {
            Ok(r) => (r, None),
            Err(e) => {
                tracing::warn!(person = %person, error = %e, "turn failed, recording timeout");
                (TurnOutcome::Skipped(SkipReason::Timeout).into(), Some(e.to_string()))
            }
        };
        let at_ms = self.clock.elapsed_ms();

        if let Some(draft) = &report.suppressed_draft {
            if self.config.record_suppressed_drafts {
                self.emit(
                    EventKind::SuppressedDraft,
                    at_ms,
                    json!({"person": person.as_str(), "content": draft, "turn": turn}),
                )?;
            }
        }
        let spoke = match &report.outcome {
            TurnOutcome::Spoke(content) => {
                let msg = Message {
                    turn,
                    seq: self.history.len() as u64,
                    sender: person.clone(),
                    content: content.clone(),
                    at_ms: at_ms.max(self.last_at_ms),
                };
                let payload = json!({
                    "person": person.as_str(),
                    "content": content,
                    "turn": turn,
                    "msg_seq": msg.seq,
                });
                let msg_at = msg.at_ms;
                self.history.append(msg)?;
                self.emit(EventKind::Message, msg_at, payload)?;
                true
            }
            TurnOutcome::Skipped(reason) => {
                let mut payload = json!({"person": person.as_str(), "reason": reason.as_str(), "turn": turn});
                if let Some(e) = &error {
                    payload["error"] = json!(e);
                }
                if let Some(reply) = &report.unparsed_decision {
                    payload["unparsed_decision"] = json!(reply);
                }
                self.skips.push(SkipRecord {
                    turn,
                    person: person.clone(),
                    reason: *reason,
                    at_ms: at_ms.max(self.last_at_ms),
                });
                self.emit(EventKind::Skip, at_ms, payload)?;
                false
            }
        };

        self.turn_count += 1;
        self.clock.advance_turn();
        self.run_mid_surveys(spoke)?;

        Ok(TurnRecord {
            turn,
            person: person.to_string(),
            outcome: report.outcome,
        })
    }

    fn run_mid_surveys(&mut self, spoke: bool) -> Result<(), SessionError> {
        let Some(survey) = self.config.survey.as_ref() else {
            return Ok(());
        };
        let n = self.persons.len() as u64;
        let mut labels = Vec::new();
        for phase in &survey.phases {
            match phase {
                SurveyPhase::EveryCycle if self.host.is_round_robin() && self.turn_count % n == 0 => {
                    labels.push(format!("cycle-{}", self.turn_count / n));
                }
                SurveyPhase::EveryMessages(k) if spoke && self.history.len() as u64 % k == 0 => {
                    labels.push(format!("messages-{}", self.history.len()));
                }
                _ => {}
            }
        }
        for label in labels {
            self.run_survey_phase(&label)?;
        }
        Ok(())
    }

    /// Asks every person every survey question. Neither questions nor
    /// answers enter the history, so later turns never see them.
    pub fn run_survey_phase(&mut self, phase_label: &str) -> Result<Vec<SurveyAnswer>, SessionError> {
        let Some(survey) = self.config.survey.as_ref() else {
            return Ok(Vec::new());
        };
        let questions: Vec<SurveyQuestion> = survey.questions.clone();
        let mut answers = Vec::new();
        for idx in 0..self.persons.len() {
            for question in &questions {
                let ctx = self.context_for(idx);
                let person = ctx.profile.id.clone();
                let raw = match self.persons[idx].answer_survey(&ctx, question) {
                    Ok(raw) => raw,
                    Err(e) => {
                        tracing::warn!(person = %person, question = %question.id, error = %e, "survey answer failed");
                        String::new()
                    }
                };
                let (parsed_value, clamped) = match question.answer_kind {
                    AnswerKind::IntegerScale { min, max } => parse_scale_answer(&raw, min, max),
                    AnswerKind::FreeText => (None, false),
                };
                let answer = SurveyAnswer {
                    person: person.clone(),
                    question_id: question.id.clone(),
                    phase_label: phase_label.to_string(),
                    raw,
                    parsed_value,
                    clamped,
                };
                let at_ms = self.clock.elapsed_ms();
                self.emit(
                    EventKind::SurveyAnswer,
                    at_ms,
                    json!({
                        "person": person.as_str(),
                        "question_id": answer.question_id,
                        "phase": answer.phase_label,
                        "raw": answer.raw,
                        "value": answer.parsed_value,
                        "clamped": answer.clamped,
                    }),
                )?;
                answers.push(answer.clone());
                self.survey_answers.push(answer);
            }
        }
        Ok(answers)
    }

    /// Runs the post survey and emits `session_end`.
    pub fn finish(&mut self, reason: EndReason) -> Result<(), SessionError> {
        if self.status != SessionStatus::Running {
            return Err(SessionError::NotRunning);
        }
        if self.survey_due(&SurveyPhase::Post) {
            self.run_survey_phase("post")?;
        }
        let elapsed_ms = self.clock.elapsed_ms();
        self.emit(
            EventKind::SessionEnd,
            elapsed_ms,
            json!({
                "reason": reason.as_str(),
                "messages": self.history.len(),
                "turns": self.turn_count,
                "elapsed_ms": elapsed_ms,
            }),
        )?;
        self.status = SessionStatus::Ended(reason);
        Ok(())
    }

    /// Start, loop until the end condition holds, finish.
    pub fn run(mut self) -> Result<SessionResult, SessionError> {
        self.start()?;
        let reason = loop {
            if let Some(reason) = self.did_end() {
                break reason;
            }
            self.iterate()?;
        };
        self.finish(reason)?;
        let elapsed_ms = self.clock.elapsed_ms();
        Ok(SessionResult {
            run_id: self.run_id,
            history: self.history,
            survey_answers: self.survey_answers,
            skips: self.skips,
            end_reason: reason,
            event_count: self.events,
            turn_count: self.turn_count,
            elapsed_ms,
        })
    }
}

pub fn run_session(
    config: &ExperimentConfig,
    persons: Vec<Box<dyn Participant>>,
    sink: &mut dyn EventSink,
    options: RunOptions,
) -> Result<SessionResult, SessionError> {
    Session::new(config, persons, sink, options)?.run()
}

/// First integer token in `raw`, clamped to `[min, max]`. The flag reports
/// whether clamping changed it.
pub fn parse_scale_answer(raw: &str, min: i64, max: i64) -> (Option<i64>, bool) {
    static INTEGER: OnceLock<Regex> = OnceLock::new();
    let re = INTEGER.get_or_init(|| Regex::new(r"-?\d+").unwrap());
    let Some(m) = re.find(raw) else {
        return (None, false);
    };
    let text = m.as_str();
    let value = text.parse::<i64>().unwrap_or(if text.starts_with('-') { i64::MIN } else { i64::MAX });
    let clamped = value.clamp(min, max);
    (Some(clamped), clamped != value)
}
