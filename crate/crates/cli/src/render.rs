//! Human-readable renderings of a loaded transcript.

use parlor_core::transcript::{EventKind, EventRecord, TranscriptView};
use serde_json::Value;

const INCOMPLETE: &str = "[incomplete]";

fn field<'a>(e: &'a EventRecord, key: &str) -> &'a str {
    e.payload.get(key).and_then(Value::as_str).unwrap_or("")
}

/// One line per message ("Name: content") and per skip ("(Name passed)").
pub fn text(view: &TranscriptView) -> String {
    let mut out = String::new();
    for e in &view.events {
        match e.kind {
            EventKind::Message => out.push_str(&format!("{}: {}\n", field(e, "person"), field(e, "content"))),
            EventKind::Skip => out.push_str(&format!("({} passed)\n", field(e, "person"))),
            _ => {}
        }
    }
    if !view.complete {
        out.push_str(INCOMPLETE);
        out.push('\n');
    }
    out
}

/// Every event as an aligned row.
pub fn table(view: &TranscriptView) -> String {
    let mut rows = vec![["seq", "at_ms", "event", "person", "detail"].map(String::from)];
    for e in &view.events {
        let detail = match e.kind {
            EventKind::SessionStart => format!("config {}", field(e, "config_hash")),
            EventKind::Message | EventKind::SuppressedDraft => field(e, "content").to_string(),
            EventKind::Skip => field(e, "reason").to_string(),
            EventKind::SurveyAnswer => format!(
                "{} [{}] {}",
                field(e, "question_id"),
                field(e, "phase"),
                e.payload.get("value").map_or("-".to_string(), |v| match v {
                    Value::Null => format!("unparsed {:?}", field(e, "raw")),
                    v => v.to_string(),
                })
            ),
            EventKind::SessionEnd => format!("ended by {}", field(e, "reason")),
        };
        rows.push([
            e.seq.to_string(),
            e.at_ms.to_string(),
            e.kind.as_str().to_string(),
            field(e, "person").to_string(),
            detail,
        ]);
    }
    let widths: Vec<usize> = (0..4)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let mut line = String::new();
        for (c, w) in widths.iter().enumerate() {
            line.push_str(&format!("{:<w$}  ", r[c], w = *w));
        }
        line.push_str(&r[4]);
        out.push_str(line.trim_end());
        out.push('\n');
    }
    if !view.complete {
        out.push_str(INCOMPLETE);
        out.push('\n');
    }
    out
}
