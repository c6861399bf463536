//! Append-only line log of one session with replay-then-follow readers.

use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use futures::Stream;
use tokio::sync::watch;

/// Lines written so far plus a signal for new lines and for the end.
pub struct LineLog {
    lines: Mutex<Vec<String>>,
    signal: watch::Sender<(usize, bool)>,
}

impl Default for LineLog {
    fn default() -> Self {
        Self {
            lines: Mutex::default(),
            signal: watch::Sender::new((0, false)),
        }
    }
}

impl LineLog {
    pub fn push(&self, line: String) {
        let mut lines = self.lines.lock().unwrap();
        lines.push(line);
        let n = lines.len();
        self.signal.send_modify(|s| s.0 = n);
    }

    /// No more lines will follow; readers finish after draining.
    pub fn close(&self) {
        self.signal.send_modify(|s| s.1 = true);
    }

    pub fn is_closed(&self) -> bool {
        self.signal.borrow().1
    }

    pub fn snapshot(&self) -> Vec<String> {
        self.lines.lock().unwrap().clone()
    }

    /// Every line from the first, then new lines as they arrive, ending
    /// once the log is closed and drained.
    pub fn follow(self: &Arc<Self>) -> impl Stream<Item = Result<Bytes, std::io::Error>> + Send + 'static {
        let rx = self.signal.subscribe();
        futures::stream::unfold((self.clone(), rx, 0usize), |(log, mut rx, sent)| async move {
            loop {
                let (available, closed) = *rx.borrow_and_update();
                if sent < available {
                    let chunk: String = log.lines.lock().unwrap()[sent..available]
                        .iter()
                        .map(|l| format!("{l}\n"))
                        .collect();
                    return Some((Ok(Bytes::from(chunk)), (log, rx, available)));
                }
                if closed || rx.changed().await.is_err() {
                    return None;
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use futures::StreamExt;

    #[tokio::test]
    async fn replays_then_follows_then_ends() {
        let log = Arc::new(LineLog::default());
        log.push("a".into());
        log.push("b".into());
        let mut stream = Box::pin(log.follow());
        assert_eq!(stream.next().await.unwrap().unwrap(), Bytes::from("a\nb\n"));
        let writer = log.clone();
        tokio::spawn(async move {
            writer.push("c".into());
            writer.close();
        });
        let mut rest = String::new();
        while let Some(chunk) = stream.next().await {
            rest.push_str(std::str::from_utf8(&chunk.unwrap()).unwrap());
        }
        assert_eq!(rest, "c\n");
    }
}
