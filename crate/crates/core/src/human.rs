//! Input channels for human participants. The session blocks on
//! [`HumanInput::request`] until the human answers or the deadline passes.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use crate::model::{AnswerKind, HistoryEntry, PersonId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    SpeakOrSkip,
    Compose,
    Survey,
}

impl InputKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InputKind::SpeakOrSkip => "speak_or_skip",
            InputKind::Compose => "compose",
            InputKind::Survey => "survey",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputRequest {
    pub person: PersonId,
    pub kind: InputKind,
    pub prompt: String,
    pub timeout: Duration,
    /// Conversation so far, for channels that render it themselves.
    pub history: Vec<HistoryEntry>,
    pub remaining_ms: Option<u64>,
    pub answer_kind: Option<AnswerKind>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputReply {
    /// Wants to speak; may already carry the message.
    Speak(Option<String>),
    Skip,
    Text(String),
    TimedOut,
    /// The channel is gone for good.
    Closed,
}

pub trait HumanInput: Send + Sync {
    fn request(&self, request: InputRequest) -> InputReply;
}

/// Terminal channel: prints prompts to `out`, reads answers line by line.
pub struct ConsoleInput {
    lines: Mutex<Receiver<String>>,
    out: Mutex<Box<dyn Write + Send>>,
    shown: Mutex<usize>,
}

impl ConsoleInput {
    pub fn new<R, W>(reader: R, out: W) -> Self
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in reader.lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Self {
            lines: Mutex::new(rx),
            out: Mutex::new(Box::new(out)),
            shown: Mutex::new(0),
        }
    }

    pub fn stdio() -> Self {
        Self::new(std::io::BufReader::new(std::io::stdin()), std::io::stdout())
    }

    fn say(&self, text: &str) {
        let mut out = self.out.lock().unwrap();
        let _ = writeln!(out, "{text}");
        let _ = out.flush();
    }
}

fn parse_speak_or_skip(line: &str) -> Option<InputReply> {
    match line.trim().to_lowercase().as_str() {
        "speak" | "yes" | "y" => Some(InputReply::Speak(None)),
        "pass" | "skip" | "no" | "n" => Some(InputReply::Skip),
        _ => None,
    }
}

impl HumanInput for ConsoleInput {
    fn request(&self, request: InputRequest) -> InputReply {
        {
            let mut shown = self.shown.lock().unwrap();
            for entry in request.history.iter().skip(*shown) {
                self.say(&format!("{}: {}", entry.sender, entry.content));
            }
            *shown = (*shown).max(request.history.len());
        }
        self.say(&request.prompt);
        let deadline = Instant::now() + request.timeout;
        let lines = self.lines.lock().unwrap();
        loop {
            let wait = deadline.saturating_duration_since(Instant::now());
            let line = match lines.recv_timeout(wait) {
                Ok(line) => line,
                Err(RecvTimeoutError::Timeout) => return InputReply::TimedOut,
                Err(RecvTimeoutError::Disconnected) => return InputReply::Closed,
            };
            match request.kind {
                InputKind::SpeakOrSkip => match parse_speak_or_skip(&line) {
                    Some(reply) => return reply,
                    None => self.say("Please answer \"speak\" or \"pass\"."),
                },
                InputKind::Compose | InputKind::Survey => return InputReply::Text(line),
            }
        }
    }
}

/// Answers from a fixed queue, then reports the channel closed. Records
/// every request it sees.
#[derive(Debug, Default)]
pub struct ScriptedInput {
    replies: Mutex<VecDeque<InputReply>>,
    seen: Mutex<Vec<InputRequest>>,
}

impl ScriptedInput {
    pub fn new(replies: impl IntoIterator<Item = InputReply>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
            seen: Mutex::default(),
        }
    }

    pub fn requests(&self) -> Vec<InputRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl HumanInput for ScriptedInput {
    fn request(&self, request: InputRequest) -> InputReply {
        self.seen.lock().unwrap().push(request);
        self.replies.lock().unwrap().pop_front().unwrap_or(InputReply::Closed)
    }
}
