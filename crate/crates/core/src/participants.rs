//! Participants: prompt assembly, answer generation and the protocols by
//! which asynchronous persons decide whether to use a granted turn.

use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

use crate::backend::{
    Backend, BackendError, BackendRequest, EndpointBackend, PromptTurn, RecordingBackend, RequestLog,
    RequestPurpose, Sampling, ScriptedBackend,
};
use crate::config::{class, ExperimentConfig, PersonSpec, DEFAULT_INPUT_TIMEOUT_MS, DEFAULT_PASS_TOKEN};
use crate::human::{HumanInput, InputKind, InputReply, InputRequest};
use crate::model::{AnswerKind, ClockSnapshot, HistoryEntry, PersonProfile, SurveyQuestion};

/// Logged with every run so transcripts can be tied to the wording used.
pub const PROMPT_TEMPLATE_VERSION: &str = "parlor-prompt/1";

/// Everything a participant may look at when granted a turn.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnContext {
    pub scenario: String,
    pub history: Vec<HistoryEntry>,
    pub profile: PersonProfile,
    pub clock: ClockSnapshot,
    pub turn: u64,
}

impl TurnContext {
    /// Granted turns so far in which nobody spoke.
    pub fn silent_turns(&self) -> u64 {
        self.turn.saturating_sub(self.history.len() as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SkipReason {
    Declined,
    EmptyOutput,
    PassToken,
    HumanPass,
    Timeout,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::Declined => "declined",
            SkipReason::EmptyOutput => "empty_output",
            SkipReason::PassToken => "pass_token",
            SkipReason::HumanPass => "human_pass",
            SkipReason::Timeout => "timeout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "declined" => SkipReason::Declined,
            "empty_output" => SkipReason::EmptyOutput,
            "pass_token" => SkipReason::PassToken,
            "human_pass" => SkipReason::HumanPass,
            "timeout" => SkipReason::Timeout,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TurnOutcome {
    Spoke(String),
    Skipped(SkipReason),
}

/// Outcome of a granted turn plus side information for the event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnReport {
    pub outcome: TurnOutcome,
    /// A draft the scheduler decided not to post.
    pub suppressed_draft: Option<String>,
    /// Scheduler reply that had no leading YES/NO and was read as NO.
    pub unparsed_decision: Option<String>,
}

impl From<TurnOutcome> for TurnReport {
    fn from(outcome: TurnOutcome) -> Self {
        Self {
            outcome,
            suppressed_draft: None,
            unparsed_decision: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PersonError {
    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),
    #[error("no answer from {0}")]
    NoAnswer(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecisionPolicy {
    Always,
    FineTuned { pass_token: String },
    DecideThenGenerate,
    GenerateThenDecide,
    /// Decided by a fixed rule instead of a scheduler model.
    Rule(SpeakRule),
    HumanPrompted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpeakRule {
    Always,
    Never,
    /// Speak on every n-th own granted turn.
    EveryNth(u64),
    /// Stay silent until at least this many granted turns went unused.
    AfterSilence(u64),
    /// YES/NO answers replayed in order.
    Script(Vec<String>),
}

/// A session participant.
pub trait Participant: Send {
    fn profile(&self) -> &PersonProfile;

    fn decision_policy(&self) -> DecisionPolicy;

    fn generate_answer(&mut self, ctx: &TurnContext) -> Result<TurnReport, PersonError>;

    /// Answers one survey question out of band; nothing here reaches the
    /// shared history.
    fn answer_survey(&mut self, ctx: &TurnContext, question: &SurveyQuestion) -> Result<String, PersonError>;
}

// ---------------------------------------------------------------------------
// Prompt assembly

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system_text: String,
    pub turns: Vec<PromptTurn>,
}

/// "M minutes S seconds", floor to whole seconds.
pub fn format_remaining(remaining_ms: u64) -> String {
    let secs = remaining_ms / 1000;
    format!("{} minutes {} seconds", secs / 60, secs % 60)
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Builds the conversation-turn prompt. Pure: equal contexts give
/// byte-identical prompts.
pub fn assemble_prompt(ctx: &TurnContext) -> Prompt {
    let name = ctx.profile.id.as_str();
    let mut lines = vec![ctx.scenario.clone(), String::new()];
    if ctx.profile.background_story.is_empty() {
        lines.push(format!("You are {name}."));
    } else {
        lines.push(format!("You are {name}. {}", ctx.profile.background_story));
    }
    if let Some(opinion) = ctx.profile.extra.get("opinion").and_then(scalar_text) {
        lines.push(format!("Your opinion: {opinion}"));
    }
    if let Some(strength) = ctx.profile.extra.get("opinion_strength").and_then(scalar_text) {
        lines.push(format!("How strongly you hold it: {strength}"));
    }
    let time_aware = ctx.profile.extra.get("time_aware").and_then(Value::as_bool);
    if let (Some(remaining), true) = (ctx.clock.remaining_ms, time_aware != Some(false)) {
        lines.push(format!("You have {} remaining.", format_remaining(remaining)));
    }
    lines.push(format!("You are {name}. Reply as {name}."));
    Prompt {
        system_text: lines.join("\n"),
        turns: ctx
            .history
            .iter()
            .map(|e| PromptTurn::said(e.sender.clone(), e.content.clone()))
            .collect(),
    }
}

/// Reads a scheduler reply: leading YES/NO token, any case, surrounding
/// punctuation ignored.
pub fn parse_decision(reply: &str) -> Option<bool> {
    let token = reply.split_whitespace().next()?;
    let word = token.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Trims, drops one echoed "Name:" label, trims again.
pub fn clean_generation(raw: &str, name: &str) -> Option<String> {
    let trimmed = raw.trim();
    let body = trimmed
        .strip_prefix(name)
        .and_then(|rest| rest.strip_prefix(':'))
        .unwrap_or(trimmed)
        .trim();
    (!body.is_empty()).then(|| body.to_string())
}

fn survey_instruction(question: &SurveyQuestion) -> String {
    match question.answer_kind {
        AnswerKind::FreeText => question.prompt.clone(),
        AnswerKind::IntegerScale { min, max } => format!(
            "{} Answer with a single integer from {min} to {max}.",
            question.prompt
        ),
    }
}

// ---------------------------------------------------------------------------
// Model-backed persons

#[derive(Clone)]
pub struct ModelHandle {
    pub backend: Arc<dyn Backend>,
    pub model_id: String,
    pub sampling: Sampling,
}

impl ModelHandle {
    pub fn new(backend: Arc<dyn Backend>, model_id: impl Into<String>) -> Self {
        Self {
            backend,
            model_id: model_id.into(),
            sampling: Sampling::default(),
        }
    }

    fn ask(&self, purpose: RequestPurpose, prompt: &Prompt, extra: Option<String>) -> Result<String, BackendError> {
        let mut turns = prompt.turns.clone();
        turns.extend(extra.map(PromptTurn::instruction));
        let request = BackendRequest {
            purpose,
            model_id: self.model_id.clone(),
            system_text: prompt.system_text.clone(),
            turns,
            sampling: self.sampling.clone(),
        };
        Ok(self.backend.complete(&request)?.text)
    }
}

enum Brain {
    Synchronous {
        generator: ModelHandle,
    },
    FineTuned {
        generator: ModelHandle,
        pass_token: String,
    },
    DecideThenGenerate {
        generator: ModelHandle,
        scheduler: ModelHandle,
    },
    GenerateThenDecide {
        generator: ModelHandle,
        scheduler: ModelHandle,
    },
    Rule {
        generator: ModelHandle,
        rule: SpeakRule,
        own_turns: u64,
    },
}

/// A participant whose words come from a model backend (remote or scripted).
pub struct ModelPerson {
    profile: PersonProfile,
    brain: Brain,
    survey: ModelHandle,
}

impl ModelPerson {
    pub fn synchronous(profile: PersonProfile, generator: ModelHandle, survey: ModelHandle) -> Self {
        Self {
            profile,
            brain: Brain::Synchronous { generator },
            survey,
        }
    }

    pub fn fine_tuned(profile: PersonProfile, generator: ModelHandle, pass_token: String, survey: ModelHandle) -> Self {
        Self {
            profile,
            brain: Brain::FineTuned { generator, pass_token },
            survey,
        }
    }

    pub fn decide_then_generate(
        profile: PersonProfile,
        generator: ModelHandle,
        scheduler: ModelHandle,
        survey: ModelHandle,
    ) -> Self {
        Self {
            profile,
            brain: Brain::DecideThenGenerate { generator, scheduler },
            survey,
        }
    }

    pub fn generate_then_decide(
        profile: PersonProfile,
        generator: ModelHandle,
        scheduler: ModelHandle,
        survey: ModelHandle,
    ) -> Self {
        Self {
            profile,
            brain: Brain::GenerateThenDecide { generator, scheduler },
            survey,
        }
    }

    pub fn rule_based(profile: PersonProfile, generator: ModelHandle, rule: SpeakRule, survey: ModelHandle) -> Self {
        Self {
            profile,
            brain: Brain::Rule {
                generator,
                rule,
                own_turns: 0,
            },
            survey,
        }
    }

    fn name(&self) -> &str {
        self.profile.id.as_str()
    }

    fn generate(&self, generator: &ModelHandle, prompt: &Prompt) -> Result<TurnOutcome, PersonError> {
        let raw = generator.ask(RequestPurpose::Turn, prompt, None)?;
        Ok(match clean_generation(&raw, self.name()) {
            Some(text) => TurnOutcome::Spoke(text),
            None => TurnOutcome::Skipped(SkipReason::EmptyOutput),
        })
    }
}

fn rule_says_speak(rule: &SpeakRule, own_turns: u64, ctx: &TurnContext) -> (bool, Option<String>) {
    match rule {
        SpeakRule::Always => (true, None),
        SpeakRule::Never => (false, None),
        SpeakRule::EveryNth(n) => (own_turns % n == 0, None),
        SpeakRule::AfterSilence(threshold) => (ctx.silent_turns() >= *threshold, None),
        SpeakRule::Script(answers) if answers.is_empty() => (false, None),
        SpeakRule::Script(answers) => {
            let answer = &answers[((own_turns - 1) as usize) % answers.len()];
            match parse_decision(answer) {
                Some(yes) => (yes, None),
                None => (false, Some(answer.clone())),
            }
        }
    }
}

impl Participant for ModelPerson {
    fn profile(&self) -> &PersonProfile {
        &self.profile
    }

    fn decision_policy(&self) -> DecisionPolicy {
        match &self.brain {
            Brain::Synchronous { .. } => DecisionPolicy::Always,
            Brain::FineTuned { pass_token, .. } => DecisionPolicy::FineTuned {
                pass_token: pass_token.clone(),
            },
            Brain::DecideThenGenerate { .. } => DecisionPolicy::DecideThenGenerate,
            Brain::GenerateThenDecide { .. } => DecisionPolicy::GenerateThenDecide,
            Brain::Rule { rule, .. } => DecisionPolicy::Rule(rule.clone()),
        }
    }

    fn generate_answer(&mut self, ctx: &TurnContext) -> Result<TurnReport, PersonError> {
        let prompt = assemble_prompt(ctx);
        let name = self.name().to_string();
        match &mut self.brain {
            Brain::Synchronous { generator } => {
                let generator = generator.clone();
                Ok(self.generate(&generator, &prompt)?.into())
            }
            Brain::FineTuned { generator, pass_token } => {
                let raw = generator.ask(RequestPurpose::Turn, &prompt, None)?;
                if raw.trim() == pass_token.as_str() {
                    return Ok(TurnOutcome::Skipped(SkipReason::PassToken).into());
                }
                Ok(match clean_generation(&raw, &name) {
                    Some(text) => TurnOutcome::Spoke(text),
                    None => TurnOutcome::Skipped(SkipReason::EmptyOutput),
                }
                .into())
            }
            Brain::DecideThenGenerate { generator, scheduler } => {
                let question = format!("Should {name} speak now? Answer YES or NO.");
                let reply = scheduler.ask(RequestPurpose::Schedule, &prompt, Some(question))?;
                match parse_decision(&reply) {
                    Some(true) => {
                        let generator = generator.clone();
                        Ok(self.generate(&generator, &prompt)?.into())
                    }
                    Some(false) => Ok(TurnOutcome::Skipped(SkipReason::Declined).into()),
                    None => {
                        tracing::warn!(person = %name, reply = %reply, "unparseable scheduler reply, treating as NO");
                        Ok(TurnReport {
                            outcome: TurnOutcome::Skipped(SkipReason::Declined),
                            suppressed_draft: None,
                            unparsed_decision: Some(reply),
                        })
                    }
                }
            }
            Brain::GenerateThenDecide { generator, scheduler } => {
                let raw = generator.ask(RequestPurpose::Turn, &prompt, None)?;
                let Some(draft) = clean_generation(&raw, &name) else {
                    return Ok(TurnOutcome::Skipped(SkipReason::EmptyOutput).into());
                };
                let question = format!(
                    "{name} drafted this reply:\n{draft}\nGiven this draft reply, should {name} post it? YES or NO"
                );
                let reply = scheduler.ask(RequestPurpose::Schedule, &prompt, Some(question))?;
                let decision = parse_decision(&reply);
                if decision == Some(true) {
                    return Ok(TurnOutcome::Spoke(draft).into());
                }
                if decision.is_none() {
                    tracing::warn!(person = %name, reply = %reply, "unparseable scheduler reply, treating as NO");
                }
                Ok(TurnReport {
                    outcome: TurnOutcome::Skipped(SkipReason::Declined),
                    suppressed_draft: Some(draft),
                    unparsed_decision: decision.is_none().then_some(reply),
                })
            }
            Brain::Rule {
                generator,
                rule,
                own_turns,
            } => {
                *own_turns += 1;
                let (speak, unparsed) = rule_says_speak(rule, *own_turns, ctx);
                if !speak {
                    return Ok(TurnReport {
                        outcome: TurnOutcome::Skipped(SkipReason::Declined),
                        suppressed_draft: None,
                        unparsed_decision: unparsed,
                    });
                }
                let generator = generator.clone();
                Ok(self.generate(&generator, &prompt)?.into())
            }
        }
    }

    fn answer_survey(&mut self, ctx: &TurnContext, question: &SurveyQuestion) -> Result<String, PersonError> {
        let prompt = assemble_prompt(ctx);
        Ok(self
            .survey
            .ask(RequestPurpose::Survey, &prompt, Some(survey_instruction(question)))?)
    }
}

// ---------------------------------------------------------------------------
// Humans

pub struct HumanPerson {
    profile: PersonProfile,
    asynchronous: bool,
    input: Arc<dyn HumanInput>,
    timeout: Duration,
    absent: bool,
}

impl HumanPerson {
    pub fn new(profile: PersonProfile, asynchronous: bool, input: Arc<dyn HumanInput>, timeout: Duration) -> Self {
        Self {
            profile,
            asynchronous,
            input,
            timeout,
            absent: false,
        }
    }

    pub fn is_absent(&self) -> bool {
        self.absent
    }

    fn request(&self, ctx: &TurnContext, kind: InputKind, prompt: String, answer_kind: Option<AnswerKind>) -> InputReply {
        self.input.request(InputRequest {
            person: self.profile.id.clone(),
            kind,
            prompt,
            timeout: self.timeout,
            history: ctx.history.clone(),
            remaining_ms: ctx.clock.remaining_ms,
            answer_kind,
        })
    }

    fn closed(&mut self) -> TurnReport {
        self.absent = true;
        TurnOutcome::Skipped(SkipReason::Timeout).into()
    }

    fn compose(&mut self, ctx: &TurnContext) -> TurnReport {
        let name = self.profile.id.to_string();
        let time_note = ctx
            .clock
            .remaining_ms
            .map(|r| format!(" ({} remaining)", format_remaining(r)))
            .unwrap_or_default();
        // An empty submission gets one more chance before counting as a pass.
        for attempt in 0..2 {
            let prompt = if attempt == 0 {
                format!("{name}, write your message{time_note}:")
            } else {
                format!("{name}, the message was empty; write it again or leave it empty to pass:")
            };
            match self.request(ctx, InputKind::Compose, prompt, None) {
                InputReply::Text(text) | InputReply::Speak(Some(text)) => {
                    if let Some(text) = clean_generation(&text, "") {
                        return TurnOutcome::Spoke(text).into();
                    }
                }
                InputReply::Speak(None) => {}
                InputReply::Skip => return TurnOutcome::Skipped(SkipReason::HumanPass).into(),
                InputReply::TimedOut => return TurnOutcome::Skipped(SkipReason::Timeout).into(),
                InputReply::Closed => return self.closed(),
            }
        }
        TurnOutcome::Skipped(SkipReason::HumanPass).into()
    }
}

impl Participant for HumanPerson {
    fn profile(&self) -> &PersonProfile {
        &self.profile
    }

    fn decision_policy(&self) -> DecisionPolicy {
        if self.asynchronous {
            DecisionPolicy::HumanPrompted
        } else {
            DecisionPolicy::Always
        }
    }

    fn generate_answer(&mut self, ctx: &TurnContext) -> Result<TurnReport, PersonError> {
        if self.absent {
            return Ok(TurnOutcome::Skipped(SkipReason::Timeout).into());
        }
        if self.asynchronous {
            let prompt = format!("{}, it is your turn. Speak or pass? [speak/pass]", self.profile.id);
            match self.request(ctx, InputKind::SpeakOrSkip, prompt, None) {
                InputReply::Skip => return Ok(TurnOutcome::Skipped(SkipReason::HumanPass).into()),
                InputReply::TimedOut => return Ok(TurnOutcome::Skipped(SkipReason::Timeout).into()),
                InputReply::Closed => return Ok(self.closed()),
                InputReply::Speak(Some(text)) | InputReply::Text(text) => {
                    if let Some(text) = clean_generation(&text, "") {
                        return Ok(TurnOutcome::Spoke(text).into());
                    }
                }
                InputReply::Speak(None) => {}
            }
        }
        Ok(self.compose(ctx))
    }

    fn answer_survey(&mut self, ctx: &TurnContext, question: &SurveyQuestion) -> Result<String, PersonError> {
        if self.absent {
            return Err(PersonError::NoAnswer(self.profile.id.to_string()));
        }
        match self.request(ctx, InputKind::Survey, survey_instruction(question), Some(question.answer_kind)) {
            InputReply::Text(text) | InputReply::Speak(Some(text)) => Ok(text),
            InputReply::Closed => {
                self.absent = true;
                Err(PersonError::NoAnswer(self.profile.id.to_string()))
            }
            _ => Err(PersonError::NoAnswer(self.profile.id.to_string())),
        }
    }
}

// ---------------------------------------------------------------------------
// Construction from config

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("person {0:?} needs an endpoint backend but none is configured")]
    NoEndpoint(String),
    #[error("human person {0:?} has no input channel")]
    NoHumanInput(String),
    #[error("person {person:?} has unsupported class {class:?}")]
    UnsupportedClass { person: String, class: String },
}

/// What persons are built from besides their config entries.
#[derive(Clone, Default)]
pub struct PersonFactory {
    pub endpoint: Option<EndpointBackend>,
    pub human_input: Option<Arc<dyn HumanInput>>,
    /// When set, every backend call is recorded here.
    pub request_log: Option<RequestLog>,
}

impl PersonFactory {
    pub fn scripted_only() -> Self {
        Self::default()
    }

    pub fn build_all(&self, config: &ExperimentConfig) -> Result<Vec<Box<dyn Participant>>, BuildError> {
        config.persons.iter().map(|p| self.build(p)).collect()
    }

    pub fn build(&self, spec: &PersonSpec) -> Result<Box<dyn Participant>, BuildError> {
        let profile = spec.profile();
        let name = spec.name.to_string();
        let survey = || self.survey_handle(spec);
        Ok(match spec.class.as_str() {
            class::HUMAN | class::ASYNC_HUMAN => {
                let input = self
                    .human_input
                    .clone()
                    .ok_or_else(|| BuildError::NoHumanInput(name.clone()))?;
                let timeout = Duration::from_millis(spec.u64_param("input_timeout_ms").unwrap_or(DEFAULT_INPUT_TIMEOUT_MS));
                Box::new(HumanPerson::new(profile, spec.class == class::ASYNC_HUMAN, input, timeout))
            }
            class::SCRIPTED => {
                let generator = self.scripted(&name, spec.list_param("script").unwrap_or_default());
                Box::new(ModelPerson::synchronous(profile, generator, survey()?))
            }
            class::SCRIPTED_ASYNC => {
                let generator = self.scripted(&name, spec.list_param("script").unwrap_or_default());
                let rule = match spec.str_param("policy").unwrap_or("always") {
                    "never" => SpeakRule::Never,
                    "every_nth" => SpeakRule::EveryNth(spec.u64_param("every").unwrap_or(1).max(1)),
                    "after_silence" => SpeakRule::AfterSilence(spec.u64_param("silence_threshold").unwrap_or(0)),
                    "script" => SpeakRule::Script(spec.list_param("decisions").unwrap_or_default()),
                    _ => SpeakRule::Always,
                };
                Box::new(ModelPerson::rule_based(profile, generator, rule, survey()?))
            }
            class::ENDPOINT | class::HUGGING_FACE => {
                let model = spec
                    .str_param("model_name")
                    .or_else(|| spec.str_param("model_path"))
                    .unwrap_or_default();
                let generator = self.model(spec, model, "script")?;
                Box::new(ModelPerson::synchronous(profile, generator, survey()?))
            }
            class::FINE_TUNED_ASYNC => {
                let generator = self.model(spec, spec.str_param("model_name").unwrap_or_default(), "script")?;
                let pass_token = spec.str_param("pass_token").unwrap_or(DEFAULT_PASS_TOKEN).to_string();
                Box::new(ModelPerson::fine_tuned(profile, generator, pass_token, survey()?))
            }
            class::DECIDE_THEN_GENERATE | class::GENERATE_THEN_DECIDE | class::GROUP_DISCUSSANT => {
                let generator = self.model(spec, spec.str_param("generation_model_name").unwrap_or_default(), "script")?;
                let scheduler = self.model(
                    spec,
                    spec.str_param("scheduling_model_name").unwrap_or_default(),
                    "scheduler_script",
                )?;
                let generate_first = spec.class == class::GENERATE_THEN_DECIDE
                    || (spec.class == class::GROUP_DISCUSSANT
                        && spec.str_param("order") == Some("generate_then_decide"));
                if generate_first {
                    Box::new(ModelPerson::generate_then_decide(profile, generator, scheduler, survey()?))
                } else {
                    Box::new(ModelPerson::decide_then_generate(profile, generator, scheduler, survey()?))
                }
            }
            other => {
                return Err(BuildError::UnsupportedClass {
                    person: name,
                    class: other.to_string(),
                })
            }
        })
    }

    fn wrap(&self, person: &str, backend: Arc<dyn Backend>) -> Arc<dyn Backend> {
        match &self.request_log {
            Some(log) => Arc::new(RecordingBackend::new(person, backend, log.clone())),
            None => backend,
        }
    }

    fn scripted(&self, person: &str, outputs: Vec<String>) -> ModelHandle {
        ModelHandle::new(self.wrap(person, Arc::new(ScriptedBackend::new(outputs))), "scripted")
    }

    fn model(&self, spec: &PersonSpec, model_id: &str, script_key: &str) -> Result<ModelHandle, BuildError> {
        let name = spec.name.as_str();
        let mut handle = if spec.str_param("backend") == Some("scripted") {
            let mut h = self.scripted(name, spec.list_param(script_key).unwrap_or_default());
            h.model_id = model_id.to_string();
            h
        } else {
            let endpoint = self
                .endpoint
                .as_ref()
                .ok_or_else(|| BuildError::NoEndpoint(name.to_string()))?;
            let endpoint = match spec.str_param("base_url") {
                Some(url) => endpoint.with_base_url(url),
                None => endpoint.clone(),
            };
            ModelHandle::new(self.wrap(name, Arc::new(endpoint)), model_id)
        };
        if let Some(t) = spec.f64_param("temperature") {
            handle.sampling.temperature = t;
        }
        if let Some(m) = spec.u64_param("max_tokens") {
            handle.sampling.max_tokens = m.min(u32::MAX as u64) as u32;
        }
        Ok(handle)
    }

    /// Surveys go to `survey_script` when given, otherwise to the person's
    /// generation endpoint; scripted persons without one cannot answer.
    fn survey_handle(&self, spec: &PersonSpec) -> Result<ModelHandle, BuildError> {
        let name = spec.name.as_str();
        if let Some(script) = spec.list_param("survey_script") {
            return Ok(self.scripted(name, script));
        }
        let model = spec
            .str_param("generation_model_name")
            .or_else(|| spec.str_param("model_name"))
            .or_else(|| spec.str_param("model_path"));
        match model {
            Some(model) if spec.str_param("backend") == Some("endpoint") => self.model(spec, model, "script"),
            _ => Ok(self.scripted(name, Vec::new())),
        }
    }
}
