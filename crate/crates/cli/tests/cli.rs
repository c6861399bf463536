use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use parlor_core::testkit::StubServer;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn parlor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parlor"))
        .args(args)
        .stdin(Stdio::null())
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_accepts_published_example() {
    let out = parlor(&["validate", path_str(&fixture("fig2.json"))]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("3 persons"));
}

#[test]
fn validate_reports_syntax_position_of_printed_example() {
    let out = parlor(&["validate", path_str(&fixture("fig2_as_printed.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 26"), "{}", stderr(&out));
}

#[test]
fn validate_names_empty_persons() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(fixture("fig2.json")).unwrap()).unwrap();
    doc["persons"] = serde_json::json!([]);
    let file = dir.path().join("empty.json");
    fs::write(&file, doc.to_string()).unwrap();
    let out = parlor(&["validate", path_str(&file)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("persons"));
    let out = parlor(&["validate", path_str(&dir.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn golden_runs_match_and_out_is_created() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a/nested");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = parlor(&["run", path_str(&fixture("three_scripted.json")), "--golden", "--out", path_str(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let ta = fs::read(a.join("run.events.jsonl")).unwrap();
    assert_eq!(ta, fs::read(b.join("run.events.jsonl")).unwrap());

    let c = dir.path().join("c");
    parlor(&["run", path_str(&fixture("three_scripted.json")), "--golden", "--seed", "8", "--out", path_str(&c)]);
    let tc = fs::read_to_string(c.join("run.events.jsonl")).unwrap();
    assert!(tc.lines().next().unwrap().contains(r#""seed":8"#));
}

#[test]
fn human_without_terminal_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = parlor(&["run", path_str(&fixture("with_human.json")), "--out", path_str(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Victor"), "{}", stderr(&o));
    assert!(!dir.path().join("run.events.jsonl").exists());
}

#[test]
fn replay_renders_messages_and_marks_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    parlor(&["run", path_str(&fixture("three_scripted.json")), "--golden", "--out", path_str(dir.path())]);
    let file = dir.path().join("run.events.jsonl");
    let o = parlor(&["replay", path_str(&file)]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 20);
    assert_eq!(text.lines().next().unwrap(), "Katya: We should help people in need.");

    let table = stdout(&parlor(&["replay", path_str(&file), "--format", "table"]));
    assert_eq!(table.lines().count(), 1 + 22);

    let full = fs::read_to_string(&file).unwrap();
    let cut: Vec<&str> = full.lines().collect();
    let partial = dir.path().join("partial.events.jsonl");
    fs::write(&partial, cut[..cut.len() - 1].join("\n") + "\n").unwrap();
    let text = stdout(&parlor(&["replay", path_str(&partial)]));
    assert_eq!(text.lines().last().unwrap(), "[incomplete]");

    let bad = dir.path().join("bad.events.jsonl");
    fs::write(&bad, "garbage\n").unwrap();
    assert_eq!(parlor(&["replay", path_str(&bad)]).status.code(), Some(1));
}

#[test]
fn batch_writes_runs_and_is_parallel_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("three_scripted_survey.json");
    for (name, p) in [("p1", "1"), ("p4", "4")] {
        let out = dir.path().join(name);
        let o = parlor(&["batch", path_str(&cfg), "--runs", "3", "--seed", "5", "--parallel", p, "--golden", "--out", path_str(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for i in 0..3 {
        let f = format!("run-{i}.events.jsonl");
        assert_eq!(fs::read(dir.path().join("p1").join(&f)).unwrap(), fs::read(dir.path().join("p4").join(&f)).unwrap());
    }
    let csv = fs::read_to_string(dir.path().join("p1/survey.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 3 * 2);
}

#[test]
fn batch_failure_exits_nonzero_with_summary() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("run-1.events.jsonl")).unwrap();
    let o = parlor(&["batch", path_str(&fixture("three_scripted.json")), "--runs", "3", "--out", path_str(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("run 1"));
    assert!(stdout(&o).contains("FAILED"));
    assert!(dir.path().join("run-2.events.jsonl").is_file());
    assert!(dir.path().join("summary.jsonl").is_file());
}

#[test]
fn batch_rejects_humans() {
    let dir = tempfile::tempdir().unwrap();
    let o = parlor(&["batch", path_str(&fixture("with_human.json")), "--runs", "2", "--out", path_str(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn backend_url_comes_from_environment() {
    let stub = StubServer::start(["From the stub."]);
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_parlor"))
        .args(["run", path_str(&fixture("endpoint.json")), "--golden", "--out", path_str(dir.path())])
        .env("PARLOR_BACKEND_URL", stub.base_url())
        .stdin(Stdio::null())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stub.requests().len(), 2);
    let text = fs::read_to_string(dir.path().join("run.events.jsonl")).unwrap();
    assert!(text.contains("From the stub."));
}

#[test]
fn serve_answers_http() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_parlor"))
        .args(["serve", "--addr", "127.0.0.1:0", "--data-dir", path_str(dir.path())])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited").unwrap();
        if let Some(rest) = line.strip_prefix("listening on http://") {
            break rest.to_string();
        }
    };
    let body = fs::read_to_string(fixture("fig2.json")).unwrap();
    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(
        stream,
        "POST /sessions HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 201"), "{response}");
    assert!(response.contains(r#""human_slots":["Victor"]"#));
}
