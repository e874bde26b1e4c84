#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use base64::Engine;
use georerank::CandidateList;
use serde_json::{json, Value};

type Handler = dyn Fn(usize, &str) -> (u16, String) + Send + Sync;
type HeaderLog = Arc<Mutex<Vec<Vec<(String, String)>>>>;

/// Minimal chat-completions server on a random local port.
pub struct StubServer {
    pub url: String,
    server: Arc<tiny_http::Server>,
    hits: Arc<AtomicUsize>,
    pub headers: HeaderLog,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    /// `handler(index, body)` returns status and body for the `index`-th request.
    pub fn start(handler: impl Fn(usize, &str) -> (u16, String) + Send + Sync + 'static) -> StubServer {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind"));
        let port = server.server_addr().to_ip().expect("ip listener").port();
        let hits = Arc::new(AtomicUsize::new(0));
        let headers = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let thread = {
            let server = Arc::clone(&server);
            let hits = Arc::clone(&hits);
            let headers = Arc::clone(&headers);
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let idx = hits.fetch_add(1, Ordering::SeqCst);
                    headers.lock().unwrap().push(
                        req.headers()
                            .iter()
                            .map(|h| (h.field.to_string().to_ascii_lowercase(), h.value.to_string()))
                            .collect(),
                    );
                    let mut body = String::new();
                    let _ = req.as_reader().read_to_string(&mut body);
                    let handler = Arc::clone(&handler);
                    // One thread per request so concurrent clients are not serialized.
                    std::thread::spawn(move || {
                        let (status, text) = handler(idx, &body);
                        let resp = tiny_http::Response::from_string(text)
                            .with_status_code(status)
                            .with_header("Content-Type: application/json".parse::<tiny_http::Header>().unwrap());
                        let _ = req.respond(resp);
                    });
                }
            })
        };
        StubServer {
            url: format!("http://127.0.0.1:{port}/v1/chat/completions"),
            server,
            hits,
            headers,
            thread: Some(thread),
        }
    }

    pub fn requests(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn chat_reply(content: &str, positions: &[Vec<(&str, f64)>]) -> String {
    let mut body = json!({
        "id": "stub",
        "object": "chat.completion",
        "choices": [{ "index": 0, "message": { "role": "assistant", "content": content }, "finish_reason": "stop" }],
    });
    if !positions.is_empty() {
        let content: Vec<Value> = positions
            .iter()
            .map(|alts| {
                let top: Vec<Value> = alts
                    .iter()
                    .map(|(t, p)| json!({ "token": t, "logprob": p.ln() }))
                    .collect();
                json!({ "token": alts[0].0, "logprob": alts[0].1.ln(), "top_logprobs": top })
            })
            .collect();
        body["choices"][0]["logprobs"] = json!({ "content": content });
    }
    body.to_string()
}

/// Decoded payloads of all data-URI images in a request body, in order.
pub fn request_images(body: &str) -> Vec<String> {
    let v: Value = serde_json::from_str(body).expect("request is JSON");
    let mut out = Vec::new();
    for msg in v["messages"].as_array().expect("messages") {
        if let Some(parts) = msg["content"].as_array() {
            for part in parts {
                if let Some(url) = part.pointer("/image_url/url").and_then(Value::as_str) {
                    let b64 = url.split_once(',').expect("data uri").1;
                    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).expect("base64");
                    out.push(String::from_utf8(bytes).expect("utf8 test image"));
                }
            }
        }
    }
    out
}

/// Yes/No server: the aerial image's file content is `p=<prob>`, and the
/// reply puts probability `prob` on "Yes" and `1 - prob` on "No".
pub fn yesno_handler(_idx: usize, body: &str) -> (u16, String) {
    let images = request_images(body);
    let p: f64 = images
        .last()
        .and_then(|s| s.strip_prefix("p="))
        .and_then(|s| s.parse().ok())
        .expect("aerial image carries p=");
    let answer = if p >= 0.5 { "Yes" } else { "No" };
    (200, chat_reply(answer, &[vec![("Yes", p), ("No", 1.0 - p)]]))
}

/// Probability the yes/no stub assigns to a candidate.
pub fn stub_yes_probability(list: &CandidateList, candidate_id: &str) -> f64 {
    let c = list.candidate(candidate_id).expect("candidate");
    if list.is_ground_truth(candidate_id) {
        0.9
    } else {
        0.05 + 0.8 * f64::from(c.initial_rank) / (list.k as f64 + 1.0) * 0.5
    }
}

/// Writes the image files referenced by `lists` under `root`.
pub fn write_images(root: &Path, lists: &[CandidateList]) {
    for l in lists {
        let g = root.join(&l.query.image_ref);
        std::fs::create_dir_all(g.parent().unwrap()).unwrap();
        std::fs::write(&g, format!("ground {}", l.query.id)).unwrap();
        for c in &l.candidates {
            let a = root.join(&c.image_ref);
            std::fs::create_dir_all(a.parent().unwrap()).unwrap();
            std::fs::write(&a, format!("p={}", stub_yes_probability(l, &c.id))).unwrap();
        }
    }
}

pub fn ids(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}
