//! A small deterministic completion server for tests and offline demos.
//!
//! It speaks the same JSON protocol that [`RemoteBackend`](super::RemoteBackend)
//! expects. Tokens are whitespace-separated words. The log-probability of a
//! word depends only on the word and on which passages of the prompt contain
//! it, with earlier passages counting more, so the server has a built-in
//! position bias.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::seed::fnv1a64;

#[derive(Debug, Deserialize)]
struct Request {
    prompt: String,
    #[serde(default)]
    max_tokens: u32,
    #[serde(default)]
    echo: bool,
    #[serde(default)]
    logprobs: Option<u32>,
}

#[derive(Default)]
struct Shared {
    requests: AtomicUsize,
    fail_next: AtomicUsize,
    stop: AtomicBool,
}

/// Handle to a running stub server. The server stops when this is dropped.
pub struct StubServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds an ephemeral localhost port and starts serving.
    pub fn start() -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared::default());
        let worker = Arc::clone(&shared);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if worker.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let conn = Arc::clone(&worker);
                std::thread::spawn(move || {
                    if let Err(e) = serve(stream, &conn) {
                        log::debug!("stub connection error: {e}");
                    }
                });
            }
        });
        Ok(Self {
            addr,
            shared,
            handle: Some(handle),
        })
    }

    /// Base URL to hand to a `RemoteConfig`.
    pub fn endpoint(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Completion requests received so far, including failed ones.
    pub fn requests(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }

    /// Answers the next `n` requests with HTTP 503.
    pub fn fail_next(&self, n: usize) {
        self.shared.fail_next.store(n, Ordering::SeqCst);
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, shared: &Shared) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(());
    }
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.trim().eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or("");
    let path = parts.next().unwrap_or("");
    let (status, payload) = if method != "POST" || !path.ends_with("/completions") {
        (404, json!({"error": "not found"}))
    } else {
        shared.requests.fetch_add(1, Ordering::SeqCst);
        let failing = shared
            .fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if failing {
            (503, json!({"error": "overloaded"}))
        } else {
            match serde_json::from_slice::<Request>(&body) {
                Ok(req) => (200, complete(&req)),
                Err(e) => (400, json!({"error": e.to_string()})),
            }
        }
    };
    respond(stream, status, &payload)
}

fn respond(mut stream: TcpStream, status: u16, payload: &Value) -> std::io::Result<()> {
    let body = serde_json::to_vec(payload).expect("json payload");
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        _ => "Service Unavailable",
    };
    let head = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(&body)?;
    stream.flush()
}

/// Whitespace tokens with their byte offsets.
fn tokenize(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, &text[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &text[s..]));
    }
    out
}

/// Passage bodies in prompt order.
fn passages(prompt: &str) -> Vec<&str> {
    prompt
        .lines()
        .filter_map(|l| l.strip_prefix("Passage ").and_then(|r| r.split_once(": ")).map(|(_, t)| t))
        .collect()
}

fn normalize(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

fn word_logprob(word: &str, context: &[&str]) -> f64 {
    let w = normalize(word);
    let base = -0.5 - (fnv1a64(w.as_bytes()) % 1000) as f64 / 400.0;
    let support: f64 = context
        .iter()
        .enumerate()
        .filter(|(_, p)| tokenize(p).iter().any(|(_, t)| normalize(t) == w))
        .map(|(k, _)| 1.0 / (k + 1) as f64)
        .sum();
    (base + support).min(-0.01)
}

/// Last word of each passage, the stub's notion of that passage's answer.
fn candidates(context: &[&str]) -> Vec<String> {
    context
        .iter()
        .filter_map(|p| tokenize(p).last().map(|(_, t)| normalize(t)))
        .filter(|t| !t.is_empty())
        .collect()
}

fn complete(req: &Request) -> Value {
    let context = passages(&req.prompt);
    let mut text = String::new();
    let mut tokens = Vec::new();
    let mut token_logprobs = Vec::new();
    let mut offsets = Vec::new();
    let mut top = Vec::new();

    if req.echo {
        for (i, (off, tok)) in tokenize(&req.prompt).into_iter().enumerate() {
            tokens.push(Value::from(tok));
            offsets.push(Value::from(off));
            token_logprobs.push(if i == 0 { Value::Null } else { Value::from(word_logprob(tok, &context)) });
            top.push(Value::Null);
        }
    }
    if req.max_tokens > 0 {
        let cands = candidates(&context);
        let answer = cands.first().cloned().unwrap_or_else(|| "unknown".to_string());
        text = format!(" {answer}");
        tokens.push(Value::from(text.clone()));
        offsets.push(Value::from(req.prompt.len()));
        token_logprobs.push(Value::from(-0.1));
        let mut alts = BTreeMap::new();
        for (k, c) in cands.iter().enumerate().take(req.logprobs.unwrap_or(1).max(1) as usize) {
            alts.entry(c.clone()).or_insert(-0.1 - 0.7 * k as f64);
        }
        if alts.is_empty() {
            alts.insert(answer, -0.1);
        }
        top.push(json!(alts));
    }
    let logprobs = req.logprobs.map(|_| {
        json!({
            "tokens": tokens,
            "token_logprobs": token_logprobs,
            "text_offset": offsets,
            "top_logprobs": top,
        })
    });
    json!({
        "object": "text_completion",
        "choices": [{"index": 0, "text": text, "logprobs": logprobs}],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_keeps_offsets() {
        let t = tokenize("  ab c\nd ");
        assert_eq!(t, vec![(2, "ab"), (5, "c"), (7, "d")]);
    }

    #[test]
    fn earlier_passages_support_more() {
        let first = word_logprob("paris", &["capital is Paris", "nothing here"]);
        let second = word_logprob("paris", &["nothing here", "capital is Paris"]);
        let none = word_logprob("paris", &["nothing here", "nor here"]);
        assert!(first > second && second > none);
    }
}
