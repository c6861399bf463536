//! Routes human submissions from HTTP clients into the engine thread that
//! is blocked waiting for them.

use std::collections::HashMap;
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parlor_core::human::{HumanInput, InputKind, InputReply, InputRequest};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Speak,
    Skip,
    SurveyAnswer,
}

impl Action {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "speak" => Action::Speak,
            "skip" => Action::Skip,
            "survey_answer" => Action::SurveyAnswer,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    Expired,
    Duplicate,
    UnknownRequest,
    Unclaimed,
    Empty,
    WrongAction,
}

impl Rejection {
    pub fn as_str(self) -> &'static str {
        match self {
            Rejection::Expired => "expired",
            Rejection::Duplicate => "duplicate",
            Rejection::UnknownRequest => "unknown_request",
            Rejection::Unclaimed => "unclaimed",
            Rejection::Empty => "empty",
            Rejection::WrongAction => "wrong_action",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Resolution {
    Consumed,
    Expired,
}

struct Pending {
    person: String,
    kind: InputKind,
    deadline: Instant,
    reply: Sender<InputReply>,
}

#[derive(Default)]
struct State {
    claims: HashMap<String, String>,
    pending: HashMap<String, Pending>,
    resolved: HashMap<String, Resolution>,
    next_id: u64,
}

type Notify = Box<dyn Fn(Value) + Send + Sync>;

/// The human input channel of one gateway session. Each request is
/// consumed at most once: by the first valid submission or by its deadline.
pub struct GatewayInput {
    slots: Vec<String>,
    state: Mutex<State>,
    notify: Notify,
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl GatewayInput {
    /// `notify` receives every notice for the session's event stream.
    pub fn new(slots: Vec<String>, notify: impl Fn(Value) + Send + Sync + 'static) -> Self {
        Self {
            slots,
            state: Mutex::default(),
            notify: Box::new(notify),
        }
    }

    pub fn slots(&self) -> &[String] {
        &self.slots
    }

    pub fn is_slot(&self, person: &str) -> bool {
        self.slots.iter().any(|s| s == person)
    }

    /// First come, first served. `None` when the slot is already taken.
    pub fn claim(&self, person: &str) -> Option<String> {
        let mut state = self.state.lock().unwrap();
        if state.claims.contains_key(person) {
            return None;
        }
        let token = uuid::Uuid::new_v4().simple().to_string();
        state.claims.insert(person.to_string(), token.clone());
        Some(token)
    }

    pub fn claimed(&self) -> Vec<String> {
        let mut v: Vec<String> = self.state.lock().unwrap().claims.keys().cloned().collect();
        v.sort();
        v
    }

    pub fn pending_ids(&self) -> Vec<String> {
        self.state.lock().unwrap().pending.keys().cloned().collect()
    }

    pub fn submit(
        &self,
        person: &str,
        token: &str,
        request_id: &str,
        action: Action,
        content: Option<&str>,
    ) -> Result<(), Rejection> {
        let mut state = self.state.lock().unwrap();
        if state.claims.get(person).map(String::as_str) != Some(token) {
            return Err(Rejection::Unclaimed);
        }
        match state.resolved.get(request_id) {
            Some(Resolution::Consumed) => return Err(Rejection::Duplicate),
            Some(Resolution::Expired) => return Err(Rejection::Expired),
            None => {}
        }
        let Some(pending) = state.pending.get(request_id) else {
            return Err(Rejection::UnknownRequest);
        };
        if pending.person != person {
            return Err(Rejection::UnknownRequest);
        }
        if Instant::now() >= pending.deadline {
            return Err(Rejection::Expired);
        }
        let text = content.map(str::trim).filter(|t| !t.is_empty()).map(str::to_string);
        let reply = match (pending.kind, action) {
            (InputKind::SpeakOrSkip, Action::Speak) if content.is_none() => InputReply::Speak(None),
            (InputKind::SpeakOrSkip, Action::Speak) => InputReply::Speak(Some(text.ok_or(Rejection::Empty)?)),
            (InputKind::Compose, Action::Speak) => InputReply::Text(text.ok_or(Rejection::Empty)?),
            (InputKind::SpeakOrSkip | InputKind::Compose, Action::Skip) => InputReply::Skip,
            (InputKind::Survey, Action::SurveyAnswer) => InputReply::Text(text.ok_or(Rejection::Empty)?),
            (InputKind::Survey, Action::Skip) => InputReply::Skip,
            _ => return Err(Rejection::WrongAction),
        };
        let pending = state.pending.remove(request_id).expect("checked above");
        state.resolved.insert(request_id.to_string(), Resolution::Consumed);
        // The engine side may already have given up; the removal above is
        // what makes the submission count.
        let _ = pending.reply.send(reply);
        (self.notify)(json!({"kind": "input_resolved", "person": person, "request_id": request_id}));
        Ok(())
    }
}

impl HumanInput for GatewayInput {
    fn request(&self, request: InputRequest) -> InputReply {
        let (tx, rx) = mpsc::channel();
        let timeout_ms = request.timeout.as_millis() as u64;
        let id = {
            let mut state = self.state.lock().unwrap();
            state.next_id += 1;
            let id = format!("req-{}", state.next_id);
            state.pending.insert(
                id.clone(),
                Pending {
                    person: request.person.to_string(),
                    kind: request.kind,
                    deadline: Instant::now() + request.timeout,
                    reply: tx,
                },
            );
            let mut notice = json!({
                "kind": "input_request",
                "person": request.person.as_str(),
                "request_id": id,
                "request_kind": request.kind.as_str(),
                "prompt": request.prompt,
                "deadline_ms": unix_ms() + timeout_ms,
                "timeout_ms": timeout_ms,
            });
            if let Some(r) = request.remaining_ms {
                notice["remaining_ms"] = json!(r);
            }
            (self.notify)(notice);
            id
        };
        match rx.recv_timeout(request.timeout) {
            Ok(reply) => reply,
            Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => {
                let mut state = self.state.lock().unwrap();
                if state.pending.remove(&id).is_some() {
                    state.resolved.insert(id.clone(), Resolution::Expired);
                    (self.notify)(json!({"kind": "input_expired", "person": request.person.as_str(), "request_id": id}));
                    InputReply::TimedOut
                } else {
                    // A submission won the race after the wait ended.
                    rx.recv_timeout(Duration::from_millis(100)).unwrap_or(InputReply::TimedOut)
                }
            }
        }
    }
}
