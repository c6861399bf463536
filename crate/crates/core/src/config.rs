//! Experiment configuration: parsing the JSON document, validating it
//! against the class registry and checking cross-field constraints.
//!
//! The accepted document shape is
//!
//! ```json
//! {
//!   "experiment": {"scenario": "..."},
//!   "host": {"class": "Round Robin Host", "start_person_index": 0},
//!   "persons": [{"class": "...", "name": "...", "background_story": "...", ...}],
//!   "endType": {"class": "iteration", "max_num_msgs": 20},
//!   "survey": {"questions": [...], "phases": ["pre", "every_cycle", "post"]},
//!   "clock": {"mode": "virtual", "tick_ms": 30000, "limit_ms": 600000},
//!   "seed": 7
//! }
//! ```
//!
//! `survey`, `clock` and `seed` are optional. Class names are matched after
//! lowercasing and dropping spaces, underscores and hyphens, so
//! `"Round Robin Host"` and `"host_round_robin"` both resolve.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;
use std::time::Duration;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical::to_canonical_string;
use crate::model::{AnswerKind, ClockMode, PersonId, PersonProfile, SurveyQuestion};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: unknown class {class:?}")]
    UnknownClass { path: String, class: String },
    #[error("{path}: duplicate person name {name:?}")]
    DuplicatePerson { path: String, name: String },
    #[error("{path}: missing required field {field:?}")]
    MissingField { path: String, field: String },
    #[error("{path}: {message}")]
    OutOfRange { path: String, message: String },
    #[error("{path}: unknown key")]
    UnknownKey { path: String },
    #[error("{path}: expected {expected}")]
    InvalidType { path: String, expected: String },
    #[error("{}", format_violations(.0))]
    Violations(Vec<Violation>),
}

impl ConfigError {
    /// Every problem as a (path, message) violation.
    pub fn violations(&self) -> Vec<Violation> {
        match self {
            ConfigError::Violations(v) => v.clone(),
            ConfigError::Syntax { line, column, .. } => vec![Violation::new(
                format!("line {line}, column {column}"),
                self.to_string(),
            )],
            ConfigError::UnknownClass { path, .. }
            | ConfigError::DuplicatePerson { path, .. }
            | ConfigError::MissingField { path, .. }
            | ConfigError::OutOfRange { path, .. }
            | ConfigError::UnknownKey { path }
            | ConfigError::InvalidType { path, .. } => {
                vec![Violation::new(path.clone(), self.to_string())]
            }
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| format!("{}: {}", v.path, v.message))
        .collect::<Vec<_>>()
        .join("; ")
}

/// A relational problem found by [`validate_cross_refs`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// Class registry

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassKind {
    Host,
    Person,
    End,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldType {
    String,
    NonEmptyString,
    UInt { min: u64 },
    Float { min: f64, max: f64 },
    Bool,
    StringList,
    /// Opinion-strength style fields: a string or a number.
    Scalar,
    OneOf(&'static [&'static str]),
    /// Nested end conditions (any-of composite).
    EndList,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldDescriptor {
    pub name: &'static str,
    pub ty: FieldType,
    pub required: bool,
    pub default: Option<Value>,
}

impl FieldDescriptor {
    fn required(name: &'static str, ty: FieldType) -> Self {
        Self {
            name,
            ty,
            required: true,
            default: None,
        }
    }

    fn optional(name: &'static str, ty: FieldType) -> Self {
        Self {
            name,
            ty,
            required: false,
            default: None,
        }
    }

    fn with_default(name: &'static str, ty: FieldType, default: Value) -> Self {
        Self {
            name,
            ty,
            required: false,
            default: Some(default),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassDescriptor {
    pub kind: ClassKind,
    pub canonical: &'static str,
    pub aliases: &'static [&'static str],
    pub fields: Vec<FieldDescriptor>,
}

/// Maps class names to descriptors of the fields each class accepts.
#[derive(Debug)]
pub struct ClassRegistry {
    classes: Vec<ClassDescriptor>,
    by_key: HashMap<String, usize>,
}

/// Lowercases and strips spaces, underscores and hyphens.
pub fn normalize_class_name(name: &str) -> String {
    name.chars()
        .filter(|c| !matches!(c, ' ' | '_' | '-'))
        .flat_map(char::to_lowercase)
        .collect()
}

pub mod class {
    pub const ROUND_ROBIN_HOST: &str = "host_round_robin";
    pub const RANDOM_HOST: &str = "host_random";

    pub const END_NUM_MSGS: &str = "iteration";
    pub const END_TIME_LIMIT: &str = "time_limit";
    pub const END_TURN_CAP: &str = "turn_cap";
    pub const END_ANY_OF: &str = "any_of";

    pub const SCRIPTED: &str = "scripted";
    pub const SCRIPTED_ASYNC: &str = "scripted_async";
    pub const ENDPOINT: &str = "person_endpoint";
    pub const HUGGING_FACE: &str = "person_hugging_face";
    pub const HUMAN: &str = "human";
    pub const ASYNC_HUMAN: &str = "async_human";
    pub const FINE_TUNED_ASYNC: &str = "fine_tuned_async";
    pub const DECIDE_THEN_GENERATE: &str = "decide_then_generate";
    pub const GENERATE_THEN_DECIDE: &str = "generate_then_decide";
    pub const GROUP_DISCUSSANT: &str = "async_group_discussant";
}

pub const DEFAULT_PASS_TOKEN: &str = "<pass>";
pub const DEFAULT_INPUT_TIMEOUT_MS: u64 = 120_000;
pub const DEFAULT_TICK_MS: u64 = 1_000;

impl ClassRegistry {
    pub fn new(classes: Vec<ClassDescriptor>) -> Self {
        let mut by_key = HashMap::new();
        for (i, c) in classes.iter().enumerate() {
            for name in std::iter::once(&c.canonical).chain(c.aliases) {
                let prev = by_key.insert(normalize_class_name(name), i);
                assert!(prev.is_none(), "class name {name:?} registered twice");
            }
        }
        Self { classes, by_key }
    }

    /// The built-in hosts, end conditions and person classes.
    pub fn builtin() -> &'static ClassRegistry {
        static REGISTRY: OnceLock<ClassRegistry> = OnceLock::new();
        REGISTRY.get_or_init(|| ClassRegistry::new(builtin_classes()))
    }

    pub fn lookup(&self, kind: ClassKind, name: &str) -> Option<&ClassDescriptor> {
        self.by_key
            .get(&normalize_class_name(name))
            .map(|&i| &self.classes[i])
            .filter(|c| c.kind == kind)
    }

    pub fn classes(&self) -> &[ClassDescriptor] {
        &self.classes
    }
}

fn model_options() -> Vec<FieldDescriptor> {
    vec![
        FieldDescriptor::with_default("temperature", FieldType::Float { min: 0.0, max: 2.0 }, json!(0.7)),
        FieldDescriptor::with_default("max_tokens", FieldType::UInt { min: 1 }, json!(256)),
        FieldDescriptor::optional("base_url", FieldType::NonEmptyString),
        FieldDescriptor::with_default("backend", FieldType::OneOf(&["endpoint", "scripted"]), json!("endpoint")),
        FieldDescriptor::optional("script", FieldType::StringList),
        FieldDescriptor::optional("scheduler_script", FieldType::StringList),
        FieldDescriptor::optional("survey_script", FieldType::StringList),
        FieldDescriptor::optional("time_aware", FieldType::Bool),
    ]
}

fn with(mut base: Vec<FieldDescriptor>, extra: Vec<FieldDescriptor>) -> Vec<FieldDescriptor> {
    base.extend(extra);
    base
}

fn builtin_classes() -> Vec<ClassDescriptor> {
    use FieldDescriptor as F;
    use FieldType as T;
    let human_fields = || {
        vec![
            F::with_default("input_timeout_ms", T::UInt { min: 1 }, json!(DEFAULT_INPUT_TIMEOUT_MS)),
            F::optional("time_aware", T::Bool),
        ]
    };
    let two_models = || {
        vec![
            F::required("generation_model_name", T::NonEmptyString),
            F::required("scheduling_model_name", T::NonEmptyString),
        ]
    };
    vec![
        ClassDescriptor {
            kind: ClassKind::Host,
            canonical: class::ROUND_ROBIN_HOST,
            aliases: &["Round Robin Host", "round_robin"],
            fields: vec![F::with_default("start_person_index", T::UInt { min: 0 }, json!(0))],
        },
        ClassDescriptor {
            kind: ClassKind::Host,
            canonical: class::RANDOM_HOST,
            aliases: &["Random Host", "random"],
            fields: vec![],
        },
        ClassDescriptor {
            kind: ClassKind::End,
            canonical: class::END_NUM_MSGS,
            aliases: &["num_msgs", "end_type_num_msgs"],
            fields: vec![F::required("max_num_msgs", T::UInt { min: 1 })],
        },
        ClassDescriptor {
            kind: ClassKind::End,
            canonical: class::END_TIME_LIMIT,
            aliases: &["end_type_time_limit"],
            fields: vec![F::optional("limit_ms", T::UInt { min: 1 })],
        },
        ClassDescriptor {
            kind: ClassKind::End,
            canonical: class::END_TURN_CAP,
            aliases: &[],
            fields: vec![F::required("max_turns", T::UInt { min: 1 })],
        },
        ClassDescriptor {
            kind: ClassKind::End,
            canonical: class::END_ANY_OF,
            aliases: &[],
            fields: vec![F::required("conditions", T::EndList)],
        },
        ClassDescriptor {
            kind: ClassKind::Person,
            canonical: class::SCRIPTED,
            aliases: &["person_scripted"],
            fields: vec![
                F::required("script", T::StringList),
                F::optional("survey_script", T::StringList),
                F::optional("time_aware", T::Bool),
            ],
        },
        ClassDescriptor {
            kind: ClassKind::Person,
            canonical: class::SCRIPTED_ASYNC,
            aliases: &[],
            fields: vec![
                F::required("script", T::StringList),
                F::with_default(
                    "policy",
                    T::OneOf(&["always", "never", "every_nth", "after_silence", "script"]),
                    json!("always"),
                ),
                F::with_default("every", T::UInt { min: 1 }, json!(1)),
                F::with_default("silence_threshold", T::UInt { min: 0 }, json!(0)),
                F::optional("decisions", T::StringList),
                F::optional("survey_script", T::StringList),
                F::optional("time_aware", T::Bool),
            ],
        },
        ClassDescriptor {
            kind: ClassKind::Person,
            canonical: class::ENDPOINT,
            aliases: &["person_openai_completion", "openai_completion"],
            fields: with(vec![F::required("model_name", T::NonEmptyString)], model_options()),
        },
        ClassDescriptor {
            kind: ClassKind::Person,
            canonical: class::HUGGING_FACE,
            aliases: &[],
            fields: with(vec![F::required("model_path", T::NonEmptyString)], model_options()),
        },
        ClassDescriptor {
            kind: ClassKind::Person,
            canonical: class::HUMAN,
            aliases: &["person_human"],
            fields: human_fields(),
        },
        ClassDescriptor {
            kind: ClassKind::Person,
            canonical: class::ASYNC_HUMAN,
            aliases: &["asynchronous_human"],
            fields: human_fields(),
        },
        ClassDescriptor {
            kind: ClassKind::Person,
            canonical: class::FINE_TUNED_ASYNC,
            aliases: &["fine_tuned_asynchronous_person"],
            fields: with(
                vec![
                    F::required("model_name", T::NonEmptyString),
                    F::with_default("pass_token", T::NonEmptyString, json!(DEFAULT_PASS_TOKEN)),
                ],
                model_options(),
            ),
        },
        ClassDescriptor {
            kind: ClassKind::Person,
            canonical: class::DECIDE_THEN_GENERATE,
            aliases: &["first_decides_then_generates"],
            fields: with(two_models(), model_options()),
        },
        ClassDescriptor {
            kind: ClassKind::Person,
            canonical: class::GENERATE_THEN_DECIDE,
            aliases: &["first_generates_then_decides"],
            fields: with(two_models(), model_options()),
        },
        ClassDescriptor {
            kind: ClassKind::Person,
            canonical: class::GROUP_DISCUSSANT,
            aliases: &["asynchronous_group_discussant"],
            fields: with(
                with(two_models(), model_options()),
                vec![
                    F::optional("opinion", T::String),
                    F::optional("opinion_strength", T::Scalar),
                    F::with_default(
                        "order",
                        T::OneOf(&["decide_then_generate", "generate_then_decide"]),
                        json!("decide_then_generate"),
                    ),
                ],
            ),
        },
    ]
}

// ---------------------------------------------------------------------------
// Parsed configuration

/// A registered class name plus its validated, default-filled fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub class: String,
    pub params: BTreeMap<String, Value>,
}

impl ClassSpec {
    pub fn new<'a>(class: &str, params: impl IntoIterator<Item = (&'a str, Value)>) -> Self {
        Self {
            class: class.to_string(),
            params: params.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn u64_param(&self, key: &str) -> Option<u64> {
        self.params.get(key).and_then(Value::as_u64)
    }

    fn to_value(&self) -> Value {
        let mut map = Map::new();
        map.insert("class".into(), json!(self.class));
        for (k, v) in &self.params {
            map.insert(k.clone(), v.clone());
        }
        Value::Object(map)
    }
}

/// Typed view of a host spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HostClass {
    RoundRobin { start_person_index: usize },
    Random,
}

impl HostClass {
    pub fn from_spec(spec: &ClassSpec) -> Option<Self> {
        match spec.class.as_str() {
            class::ROUND_ROBIN_HOST => Some(HostClass::RoundRobin {
                start_person_index: spec.u64_param("start_person_index").unwrap_or(0) as usize,
            }),
            class::RANDOM_HOST => Some(HostClass::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonSpec {
    pub name: PersonId,
    pub class: String,
    pub background_story: String,
    pub params: BTreeMap<String, Value>,
}

impl PersonSpec {
    pub fn profile(&self) -> PersonProfile {
        PersonProfile {
            id: self.name.clone(),
            background_story: self.background_story.clone(),
            role_class: self.class.clone(),
            extra: self.params.clone(),
        }
    }

    pub fn is_human(&self) -> bool {
        matches!(self.class.as_str(), class::HUMAN | class::ASYNC_HUMAN)
    }

    pub fn time_aware(&self) -> Option<bool> {
        self.params.get("time_aware").and_then(Value::as_bool)
    }

    pub fn str_param(&self, key: &str) -> Option<&str> {
        self.params.get(key).and_then(Value::as_str)
    }

    pub fn u64_param(&self, key: &str) -> Option<u64> {
        self.params.get(key).and_then(Value::as_u64)
    }

    pub fn f64_param(&self, key: &str) -> Option<f64> {
        self.params.get(key).and_then(Value::as_f64)
    }

    pub fn list_param(&self, key: &str) -> Option<Vec<String>> {
        self.params.get(key).and_then(Value::as_array).map(|items| {
            items
                .iter()
                .filter_map(|v| v.as_str().map(str::to_string))
                .collect()
        })
    }

    fn to_value(&self) -> Value {
        let mut map = Map::new();
        map.insert("class".into(), json!(self.class));
        map.insert("name".into(), json!(self.name.as_str()));
        map.insert("background_story".into(), json!(self.background_story));
        for (k, v) in &self.params {
            map.insert(k.clone(), v.clone());
        }
        Value::Object(map)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SurveyPhase {
    Pre,
    Post,
    EveryMessages(u64),
    EveryCycle,
}

impl SurveyPhase {
    fn parse(token: &str) -> Option<Self> {
        match token {
            "pre" => Some(SurveyPhase::Pre),
            "post" => Some(SurveyPhase::Post),
            "every_cycle" => Some(SurveyPhase::EveryCycle),
            _ => token
                .strip_prefix("every_messages:")
                .and_then(|k| k.parse::<u64>().ok())
                .filter(|&k| k >= 1)
                .map(SurveyPhase::EveryMessages),
        }
    }

    fn token(&self) -> String {
        match self {
            SurveyPhase::Pre => "pre".into(),
            SurveyPhase::Post => "post".into(),
            SurveyPhase::EveryCycle => "every_cycle".into(),
            SurveyPhase::EveryMessages(k) => format!("every_messages:{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurveySpec {
    pub questions: Vec<SurveyQuestion>,
    pub phases: Vec<SurveyPhase>,
}

impl SurveySpec {
    pub fn has_phase(&self, phase: &SurveyPhase) -> bool {
        self.phases.contains(phase)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockModeSpec {
    Virtual,
    Wall,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClockSpec {
    pub mode: ClockModeSpec,
    pub tick_ms: u64,
    pub limit_ms: Option<u64>,
}

impl Default for ClockSpec {
    fn default() -> Self {
        Self {
            mode: ClockModeSpec::Virtual,
            tick_ms: DEFAULT_TICK_MS,
            limit_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: String,
    /// Whether drafts withheld by generate-then-decide persons are logged.
    pub record_suppressed_drafts: bool,
    pub host: ClassSpec,
    pub persons: Vec<PersonSpec>,
    pub end: ClassSpec,
    pub survey: Option<SurveySpec>,
    pub clock: Option<ClockSpec>,
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn roster(&self) -> Vec<PersonId> {
        self.persons.iter().map(|p| p.name.clone()).collect()
    }

    pub fn person(&self, name: &str) -> Option<&PersonSpec> {
        self.persons.iter().find(|p| p.name.as_str() == name)
    }

    pub fn human_slots(&self) -> Vec<PersonId> {
        self.persons
            .iter()
            .filter(|p| p.is_human())
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn clock_spec(&self) -> ClockSpec {
        self.clock.clone().unwrap_or_default()
    }

    /// Time limit shown to participants: the clock's own limit, else the
    /// limit of a `time_limit` end condition.
    pub fn time_limit(&self) -> Option<Duration> {
        self.clock
            .as_ref()
            .and_then(|c| c.limit_ms)
            .or_else(|| end_time_limit(&self.end))
            .map(Duration::from_millis)
    }

    pub fn clock_mode(&self) -> ClockMode {
        let spec = self.clock_spec();
        match spec.mode {
            ClockModeSpec::Virtual => ClockMode::Virtual {
                tick: Duration::from_millis(spec.tick_ms),
            },
            ClockModeSpec::Wall => ClockMode::Wall,
        }
    }

    /// Canonical document form; re-parsing it yields an equal config.
    pub fn to_document(&self) -> Value {
        let mut doc = Map::new();
        doc.insert(
            "experiment".into(),
            json!({
                "scenario": self.scenario,
                "record_suppressed_drafts": self.record_suppressed_drafts,
            }),
        );
        doc.insert("host".into(), self.host.to_value());
        doc.insert(
            "persons".into(),
            Value::Array(self.persons.iter().map(PersonSpec::to_value).collect()),
        );
        doc.insert("end_type".into(), self.end.to_value());
        if let Some(survey) = &self.survey {
            let questions: Vec<Value> = survey
                .questions
                .iter()
                .map(|q| match q.answer_kind {
                    AnswerKind::FreeText => {
                        json!({"id": q.id, "prompt": q.prompt, "kind": "free_text"})
                    }
                    AnswerKind::IntegerScale { min, max } => json!({
                        "id": q.id, "prompt": q.prompt, "kind": "integer_scale",
                        "min": min, "max": max,
                    }),
                })
                .collect();
            let phases: Vec<String> = survey.phases.iter().map(SurveyPhase::token).collect();
            doc.insert("survey".into(), json!({"questions": questions, "phases": phases}));
        }
        if let Some(clock) = &self.clock {
            let mut c = Map::new();
            c.insert(
                "mode".into(),
                json!(match clock.mode {
                    ClockModeSpec::Virtual => "virtual",
                    ClockModeSpec::Wall => "wall",
                }),
            );
            c.insert("tick_ms".into(), json!(clock.tick_ms));
            if let Some(limit) = clock.limit_ms {
                c.insert("limit_ms".into(), json!(limit));
            }
            doc.insert("clock".into(), Value::Object(c));
        }
        if let Some(seed) = self.seed {
            doc.insert("seed".into(), json!(seed));
        }
        Value::Object(doc)
    }

    /// SHA-256 of the canonical document, lowercase hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(to_canonical_string(&self.to_document()).as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn end_time_limit(spec: &ClassSpec) -> Option<u64> {
    match spec.class.as_str() {
        class::END_TIME_LIMIT => spec.u64_param("limit_ms"),
        class::END_ANY_OF => spec
            .params
            .get("conditions")
            .and_then(Value::as_array)?
            .iter()
            .filter_map(|v| parse_stored_end(v))
            .find_map(|s| end_time_limit(&s)),
        _ => None,
    }
}

/// Re-reads a nested end condition already validated into `conditions`.
pub(crate) fn parse_stored_end(v: &Value) -> Option<ClassSpec> {
    let obj = v.as_object()?;
    let class = obj.get("class")?.as_str()?.to_string();
    let params = obj
        .iter()
        .filter(|(k, _)| k.as_str() != "class")
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Some(ClassSpec { class, params })
}

// ---------------------------------------------------------------------------
// Parsing

const TOP_LEVEL_KEYS: &[&str] = &["experiment", "host", "persons", "endType", "end_type", "survey", "clock", "seed"];

/// Parses and fully validates a configuration document.
pub fn parse_config(document: &str) -> Result<ExperimentConfig, ConfigError> {
    let value: Value = serde_json::from_str(document).map_err(|e| ConfigError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    parse_config_value(&value)
}

pub fn parse_config_value(value: &Value) -> Result<ExperimentConfig, ConfigError> {
    let config = parse_structure(value)?;
    if config.seed.is_none() {
        tracing::warn!("no seed configured; using 0 (endpoint backends are not seeded)");
    }
    validate_cross_refs(&config, &ValidationOptions::default()).map_err(ConfigError::Violations)?;
    Ok(config)
}

fn parse_structure(value: &Value) -> Result<ExperimentConfig, ConfigError> {
    let registry = ClassRegistry::builtin();
    let root = as_object(value, "$")?;
    for key in root.keys() {
        if !TOP_LEVEL_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey { path: key.clone() });
        }
    }
    if root.contains_key("endType") && root.contains_key("end_type") {
        return Err(ConfigError::OutOfRange {
            path: "end_type".into(),
            message: "both \"endType\" and \"end_type\" given".into(),
        });
    }

    let experiment = as_object(require(root, "$", "experiment")?, "experiment")?;
    for key in experiment.keys() {
        if !matches!(key.as_str(), "scenario" | "record_suppressed_drafts") {
            return Err(ConfigError::UnknownKey {
                path: format!("experiment.{key}"),
            });
        }
    }
    let scenario = as_str(require(experiment, "experiment", "scenario")?, "experiment.scenario")?;
    let record_suppressed_drafts = match experiment.get("record_suppressed_drafts") {
        Some(v) => as_bool(v, "experiment.record_suppressed_drafts")?,
        None => true,
    };

    let host = parse_class(registry, ClassKind::Host, require(root, "$", "host")?, "host")?;

    let persons_value = require(root, "$", "persons")?;
    let persons_arr = persons_value.as_array().ok_or_else(|| ConfigError::InvalidType {
        path: "persons".into(),
        expected: "array".into(),
    })?;
    if persons_arr.is_empty() {
        return Err(ConfigError::OutOfRange {
            path: "persons".into(),
            message: "at least one person is required".into(),
        });
    }
    let mut persons = Vec::with_capacity(persons_arr.len());
    let mut names = BTreeSet::new();
    for (i, p) in persons_arr.iter().enumerate() {
        let path = format!("persons[{i}]");
        let spec = parse_person(registry, p, &path)?;
        if !names.insert(spec.name.clone()) {
            return Err(ConfigError::DuplicatePerson {
                path: format!("{path}.name"),
                name: spec.name.to_string(),
            });
        }
        persons.push(spec);
    }

    let (end_key, end_value) = match (root.get("endType"), root.get("end_type")) {
        (Some(v), _) => ("endType", v),
        (None, Some(v)) => ("end_type", v),
        (None, None) => {
            return Err(ConfigError::MissingField {
                path: "$".into(),
                field: "endType".into(),
            })
        }
    };
    let end = parse_class(registry, ClassKind::End, end_value, end_key)?;

    let survey = root.get("survey").map(|v| parse_survey(v)).transpose()?;
    let clock = root.get("clock").map(|v| parse_clock(v)).transpose()?;
    let seed = root
        .get("seed")
        .map(|v| {
            v.as_u64().ok_or_else(|| ConfigError::InvalidType {
                path: "seed".into(),
                expected: "unsigned 64-bit integer".into(),
            })
        })
        .transpose()?;

    Ok(ExperimentConfig {
        scenario,
        record_suppressed_drafts,
        host,
        persons,
        end,
        survey,
        clock,
        seed,
    })
}

fn require<'a>(obj: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a Value, ConfigError> {
    obj.get(key).ok_or_else(|| ConfigError::MissingField {
        path: path.to_string(),
        field: key.to_string(),
    })
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, ConfigError> {
    v.as_object().ok_or_else(|| ConfigError::InvalidType {
        path: path.to_string(),
        expected: "object".into(),
    })
}

fn as_str(v: &Value, path: &str) -> Result<String, ConfigError> {
    v.as_str().map(str::to_string).ok_or_else(|| ConfigError::InvalidType {
        path: path.to_string(),
        expected: "string".into(),
    })
}

fn as_bool(v: &Value, path: &str) -> Result<bool, ConfigError> {
    v.as_bool().ok_or_else(|| ConfigError::InvalidType {
        path: path.to_string(),
        expected: "boolean".into(),
    })
}

fn as_u64(v: &Value, path: &str) -> Result<u64, ConfigError> {
    v.as_u64().ok_or_else(|| ConfigError::InvalidType {
        path: path.to_string(),
        expected: "non-negative integer".into(),
    })
}

fn as_i64(v: &Value, path: &str) -> Result<i64, ConfigError> {
    v.as_i64().ok_or_else(|| ConfigError::InvalidType {
        path: path.to_string(),
        expected: "integer".into(),
    })
}

fn lookup_class<'r>(
    registry: &'r ClassRegistry,
    kind: ClassKind,
    obj: &Map<String, Value>,
    path: &str,
) -> Result<&'r ClassDescriptor, ConfigError> {
    let class_path = format!("{path}.class");
    let name = as_str(require(obj, path, "class")?, &class_path)?;
    registry
        .lookup(kind, &name)
        .ok_or(ConfigError::UnknownClass {
            path: class_path,
            class: name,
        })
}

fn parse_class(
    registry: &ClassRegistry,
    kind: ClassKind,
    value: &Value,
    path: &str,
) -> Result<ClassSpec, ConfigError> {
    let obj = as_object(value, path)?;
    let descriptor = lookup_class(registry, kind, obj, path)?;
    let params = parse_fields(registry, descriptor, obj, path, &["class"])?;
    Ok(ClassSpec {
        class: descriptor.canonical.to_string(),
        params,
    })
}

fn parse_person(registry: &ClassRegistry, value: &Value, path: &str) -> Result<PersonSpec, ConfigError> {
    let obj = as_object(value, path)?;
    let descriptor = lookup_class(registry, ClassKind::Person, obj, path)?;
    let name = as_str(require(obj, path, "name")?, &format!("{path}.name"))?;
    if name.trim().is_empty() {
        return Err(ConfigError::OutOfRange {
            path: format!("{path}.name"),
            message: "name must be non-empty".into(),
        });
    }
    let background_story = match obj.get("background_story") {
        Some(v) => as_str(v, &format!("{path}.background_story"))?,
        None => String::new(),
    };
    let params = parse_fields(registry, descriptor, obj, path, &["class", "name", "background_story"])?;
    Ok(PersonSpec {
        name: PersonId::new(name),
        class: descriptor.canonical.to_string(),
        background_story,
        params,
    })
}

fn parse_fields(
    registry: &ClassRegistry,
    descriptor: &ClassDescriptor,
    obj: &Map<String, Value>,
    path: &str,
    reserved: &[&str],
) -> Result<BTreeMap<String, Value>, ConfigError> {
    for key in obj.keys() {
        if !reserved.contains(&key.as_str()) && !descriptor.fields.iter().any(|f| f.name == key) {
            return Err(ConfigError::UnknownKey {
                path: format!("{path}.{key}"),
            });
        }
    }
    let mut params = BTreeMap::new();
    for field in &descriptor.fields {
        let field_path = format!("{path}.{}", field.name);
        match obj.get(field.name) {
            Some(v) => {
                let checked = check_field(registry, &field.ty, v, &field_path)?;
                params.insert(field.name.to_string(), checked);
            }
            None if field.required => {
                return Err(ConfigError::MissingField {
                    path: path.to_string(),
                    field: field.name.to_string(),
                })
            }
            None => {
                if let Some(d) = &field.default {
                    params.insert(field.name.to_string(), d.clone());
                }
            }
        }
    }
    Ok(params)
}

fn check_field(registry: &ClassRegistry, ty: &FieldType, v: &Value, path: &str) -> Result<Value, ConfigError> {
    let out_of_range = |message: String| ConfigError::OutOfRange {
        path: path.to_string(),
        message,
    };
    match ty {
        FieldType::String => Ok(json!(as_str(v, path)?)),
        FieldType::NonEmptyString => {
            let s = as_str(v, path)?;
            if s.is_empty() {
                return Err(out_of_range("must be non-empty".into()));
            }
            Ok(json!(s))
        }
        FieldType::UInt { min } => {
            let n = as_u64(v, path)?;
            if n < *min {
                return Err(out_of_range(format!("must be at least {min}, got {n}")));
            }
            Ok(json!(n))
        }
        FieldType::Float { min, max } => {
            let x = v.as_f64().ok_or_else(|| ConfigError::InvalidType {
                path: path.to_string(),
                expected: "number".into(),
            })?;
            if !(x >= *min && x <= *max) {
                return Err(out_of_range(format!("must be within [{min}, {max}], got {x}")));
            }
            Ok(v.clone())
        }
        FieldType::Bool => Ok(json!(as_bool(v, path)?)),
        FieldType::StringList => {
            let items = v.as_array().ok_or_else(|| ConfigError::InvalidType {
                path: path.to_string(),
                expected: "array of strings".into(),
            })?;
            for (i, item) in items.iter().enumerate() {
                as_str(item, &format!("{path}[{i}]"))?;
            }
            Ok(v.clone())
        }
        FieldType::Scalar => match v {
            Value::String(_) | Value::Number(_) => Ok(v.clone()),
            _ => Err(ConfigError::InvalidType {
                path: path.to_string(),
                expected: "string or number".into(),
            }),
        },
        FieldType::OneOf(options) => {
            let s = as_str(v, path)?;
            if !options.contains(&s.as_str()) {
                return Err(out_of_range(format!("must be one of {options:?}, got {s:?}")));
            }
            Ok(json!(s))
        }
        FieldType::EndList => {
            let items = v.as_array().ok_or_else(|| ConfigError::InvalidType {
                path: path.to_string(),
                expected: "array of end conditions".into(),
            })?;
            if items.is_empty() {
                return Err(out_of_range("at least one condition is required".into()));
            }
            let nested = items
                .iter()
                .enumerate()
                .map(|(i, item)| {
                    parse_class(registry, ClassKind::End, item, &format!("{path}[{i}]")).map(|s| s.to_value())
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Value::Array(nested))
        }
    }
}

fn parse_survey(value: &Value) -> Result<SurveySpec, ConfigError> {
    let obj = as_object(value, "survey")?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "questions" | "phases") {
            return Err(ConfigError::UnknownKey {
                path: format!("survey.{key}"),
            });
        }
    }
    let qs = require(obj, "survey", "questions")?
        .as_array()
        .ok_or_else(|| ConfigError::InvalidType {
            path: "survey.questions".into(),
            expected: "array".into(),
        })?;
    if qs.is_empty() {
        return Err(ConfigError::OutOfRange {
            path: "survey.questions".into(),
            message: "at least one question is required".into(),
        });
    }
    let mut questions = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, q) in qs.iter().enumerate() {
        let path = format!("survey.questions[{i}]");
        let qo = as_object(q, &path)?;
        let kind = match qo.get("kind") {
            Some(k) => as_str(k, &format!("{path}.kind"))?,
            None => "free_text".to_string(),
        };
        let allowed: &[&str] = match kind.as_str() {
            "free_text" => &["id", "prompt", "kind"],
            "integer_scale" => &["id", "prompt", "kind", "min", "max"],
            other => {
                return Err(ConfigError::OutOfRange {
                    path: format!("{path}.kind"),
                    message: format!("unknown answer kind {other:?}"),
                })
            }
        };
        for key in qo.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey {
                    path: format!("{path}.{key}"),
                });
            }
        }
        let id = as_str(require(qo, &path, "id")?, &format!("{path}.id"))?;
        if !ids.insert(id.clone()) {
            return Err(ConfigError::OutOfRange {
                path: format!("{path}.id"),
                message: format!("duplicate question id {id:?}"),
            });
        }
        let prompt = as_str(require(qo, &path, "prompt")?, &format!("{path}.prompt"))?;
        let answer_kind = if kind == "integer_scale" {
            let min = as_i64(require(qo, &path, "min")?, &format!("{path}.min"))?;
            let max = as_i64(require(qo, &path, "max")?, &format!("{path}.max"))?;
            if min >= max {
                return Err(ConfigError::OutOfRange {
                    path: format!("{path}.max"),
                    message: format!("scale max {max} must exceed min {min}"),
                });
            }
            AnswerKind::IntegerScale { min, max }
        } else {
            AnswerKind::FreeText
        };
        questions.push(SurveyQuestion {
            id,
            prompt,
            answer_kind,
        });
    }
    let phases = match obj.get("phases") {
        None => vec![SurveyPhase::Post],
        Some(v) => {
            let arr = v.as_array().ok_or_else(|| ConfigError::InvalidType {
                path: "survey.phases".into(),
                expected: "array of phase tokens".into(),
            })?;
            let mut phases = Vec::new();
            for (i, t) in arr.iter().enumerate() {
                let path = format!("survey.phases[{i}]");
                let token = as_str(t, &path)?;
                let phase = SurveyPhase::parse(&token).ok_or_else(|| ConfigError::OutOfRange {
                    path: path.clone(),
                    message: format!(
                        "unknown phase {token:?} (expected pre, post, every_cycle or every_messages:k)"
                    ),
                })?;
                if phases.contains(&phase) {
                    return Err(ConfigError::OutOfRange {
                        path,
                        message: format!("phase {token:?} listed twice"),
                    });
                }
                phases.push(phase);
            }
            phases
        }
    };
    Ok(SurveySpec { questions, phases })
}

fn parse_clock(value: &Value) -> Result<ClockSpec, ConfigError> {
    let obj = as_object(value, "clock")?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "mode" | "tick_ms" | "limit_ms") {
            return Err(ConfigError::UnknownKey {
                path: format!("clock.{key}"),
            });
        }
    }
    let mode = match obj.get("mode").map(|v| as_str(v, "clock.mode")).transpose()?.as_deref() {
        None | Some("virtual") => ClockModeSpec::Virtual,
        Some("wall") => ClockModeSpec::Wall,
        Some(other) => {
            return Err(ConfigError::OutOfRange {
                path: "clock.mode".into(),
                message: format!("unknown clock mode {other:?}"),
            })
        }
    };
    let tick_ms = match obj.get("tick_ms") {
        Some(v) => as_u64(v, "clock.tick_ms")?,
        None => DEFAULT_TICK_MS,
    };
    if tick_ms == 0 {
        return Err(ConfigError::OutOfRange {
            path: "clock.tick_ms".into(),
            message: "tick must be positive".into(),
        });
    }
    let limit_ms = obj.get("limit_ms").map(|v| as_u64(v, "clock.limit_ms")).transpose()?;
    if limit_ms == Some(0) {
        return Err(ConfigError::OutOfRange {
            path: "clock.limit_ms".into(),
            message: "limit must be positive".into(),
        });
    }
    Ok(ClockSpec { mode, tick_ms, limit_ms })
}

// ---------------------------------------------------------------------------
// Relational checks

/// What the run environment can provide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationOptions {
    /// A console or gateway channel exists for human persons.
    pub human_input_available: bool,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            human_input_available: true,
        }
    }
}

impl ValidationOptions {
    pub fn headless() -> Self {
        Self {
            human_input_available: false,
        }
    }
}

/// Checks constraints that span several parts of the config. Returns every
/// violation found; the caller decides how severe they are.
pub fn validate_cross_refs(config: &ExperimentConfig, options: &ValidationOptions) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let n = config.persons.len();

    if let Some(HostClass::RoundRobin { start_person_index }) = HostClass::from_spec(&config.host) {
        if start_person_index >= n {
            violations.push(Violation::new(
                "host.start_person_index",
                format!("start_person_index {start_person_index} out of range for {n} persons"),
            ));
        }
    }

    let limit = config.time_limit();
    for (i, p) in config.persons.iter().enumerate() {
        if p.is_human() && !options.human_input_available {
            violations.push(Violation::new(
                format!("persons[{i}]"),
                format!("human person {:?} needs an input channel (console or gateway)", p.name.as_str()),
            ));
        }
        if p.time_aware() == Some(true) && limit.is_none() {
            violations.push(Violation::new(
                format!("persons[{i}].time_aware"),
                format!(
                    "person {:?} prompts with remaining time but no clock limit is configured",
                    p.name.as_str()
                ),
            ));
        }
    }

    if let Some(survey) = &config.survey {
        if survey.has_phase(&SurveyPhase::EveryCycle) && config.host.class != class::ROUND_ROBIN_HOST {
            violations.push(Violation::new(
                "survey.phases",
                "every_cycle requires a round-robin host",
            ));
        }
    }

    check_time_limit_end(&config.end, limit.is_some(), "end_type", &mut violations);

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

fn check_time_limit_end(spec: &ClassSpec, clock_limit: bool, path: &str, out: &mut Vec<Violation>) {
    match spec.class.as_str() {
        class::END_TIME_LIMIT if spec.u64_param("limit_ms").is_none() && !clock_limit => {
            out.push(Violation::new(
                path,
                "time_limit needs limit_ms here or in clock.limit_ms",
            ));
        }
        class::END_ANY_OF => {
            if let Some(items) = spec.params.get("conditions").and_then(Value::as_array) {
                for (i, item) in items.iter().enumerate() {
                    if let Some(nested) = parse_stored_end(item) {
                        check_time_limit_end(&nested, clock_limit, &format!("{path}.conditions[{i}]"), out);
                    }
                }
            }
        }
        _ => {}
    }
}
