//! Helpers for tests: a local chat-completions stub server and builders for
//! scripted configs.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

use crate::config::{parse_config_value, ExperimentConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct StubRequest {
    pub path: String,
    pub body: Value,
}

#[derive(Default)]
struct StubState {
    requests: Vec<StubRequest>,
    statuses: VecDeque<u16>,
    replies: Vec<String>,
    served: usize,
}

/// Answers `POST .../chat/completions` with canned replies. Queued status
/// codes are returned first, one per request.
pub struct StubServer {
    addr: SocketAddr,
    state: Arc<Mutex<StubState>>,
    stop: Arc<AtomicBool>,
}

impl StubServer {
    pub fn start<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let addr = listener.local_addr().unwrap();
        let state = Arc::new(Mutex::new(StubState {
            replies: replies.into_iter().map(Into::into).collect(),
            ..StubState::default()
        }));
        let stop = Arc::new(AtomicBool::new(false));
        let (st, sp) = (state.clone(), stop.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                if sp.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = stream {
                    let _ = serve(stream, &st);
                }
            }
        });
        Self { addr, state, stop }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn fail_next(&self, statuses: &[u16]) {
        self.state.lock().unwrap().statuses.extend(statuses);
    }

    pub fn requests(&self) -> Vec<StubRequest> {
        self.state.lock().unwrap().requests.clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
    }
}

fn serve(stream: TcpStream, state: &Mutex<StubState>) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body)?;
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);

    let (status, payload) = {
        let mut s = state.lock().unwrap();
        s.requests.push(StubRequest { path, body });
        match s.statuses.pop_front() {
            Some(code) if code != 200 => (code, json!({"error": {"message": "injected failure"}})),
            _ => {
                let text = if s.replies.is_empty() {
                    String::new()
                } else {
                    s.replies[s.served % s.replies.len()].clone()
                };
                s.served += 1;
                (
                    200,
                    json!({"choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]}),
                )
            }
        }
    };
    let payload = payload.to_string();
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        if status == 200 { "OK" } else { "Error" },
        payload.len()
    )?;
    stream.flush()
}

/// A synchronous scripted person entry.
pub fn scripted_person(name: &str, script: &[&str]) -> Value {
    json!({
        "class": "scripted",
        "name": name,
        "background_story": format!("{name} has opinions."),
        "script": script,
    })
}

/// An asynchronous scripted person with the given policy fields merged in.
pub fn scripted_async_person(name: &str, script: &[&str], policy: Value) -> Value {
    let mut p = json!({
        "class": "scripted_async",
        "name": name,
        "background_story": format!("{name} listens more than talks."),
        "script": script,
    });
    if let (Some(obj), Some(extra)) = (p.as_object_mut(), policy.as_object()) {
        obj.extend(extra.clone());
    }
    p
}

/// Round-robin config over `persons`, ending after `max_num_msgs` messages.
pub fn num_msgs_config(persons: Vec<Value>, max_num_msgs: u64, seed: u64) -> Value {
    json!({
        "experiment": {"scenario": "You're discussing social welfare"},
        "host": {"class": "Round Robin Host", "start_person_index": 0},
        "persons": persons,
        "endType": {"class": "iteration", "max_num_msgs": max_num_msgs},
        "seed": seed,
    })
}

/// Three scripted persons shaped like the published example, 20 messages.
pub fn three_person_document(seed: u64) -> Value {
    num_msgs_config(
        vec![
            scripted_person("Katya", &["We should help people in need.", "Kindness costs little."]),
            scripted_person("Victor", &["People should fend for themselves.", "Welfare breeds dependence."]),
            scripted_person("Juliet", &["I can see both sides.", "Maybe something in between?"]),
        ],
        20,
        seed,
    )
}

pub fn config_from(doc: &Value) -> ExperimentConfig {
    parse_config_value(doc).expect("test config must be valid")
}
