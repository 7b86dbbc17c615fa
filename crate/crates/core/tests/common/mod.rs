#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::Value;

use hiermem::dataset::{synthetic_fixture, Conversation};
use hiermem::distill::RuleBasedProvider;
use hiermem::embedding::DeterministicEmbedder;
use hiermem::engine::{Engine, MemoryState};
use hiermem::structure::StructureConfig;

pub const DIM: usize = 256;
pub const SEED: u64 = 42;

/// One request seen by the mock server.
#[derive(Debug, Clone)]
pub struct Seen {
    pub authorization: Option<String>,
    pub body: Value,
}

pub struct MockServer {
    pub url: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
}

impl MockServer {
    pub fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

/// Serves `handler(body, request_index) -> (status, response body)` on a
/// loopback port, one request per connection.
pub fn serve<F>(handler: F) -> MockServer
where
    F: Fn(&Value, usize) -> (u16, String) + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let seen: Arc<Mutex<Vec<Seen>>> = Arc::default();
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0usize;
            let mut auth = None;
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            loop {
                line.clear();
                if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((&line, ""));
                let value = value.trim().to_string();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.parse().unwrap(),
                    "authorization" => auth = Some(value),
                    _ => {}
                }
            }
            let mut raw = vec![0u8; length];
            reader.read_exact(&mut raw).unwrap();
            let body: Value = serde_json::from_slice(&raw).unwrap_or(Value::Null);
            let index = {
                let mut s = log.lock().unwrap();
                s.push(Seen {
                    authorization: auth,
                    body: body.clone(),
                });
                s.len() - 1
            };
            let (status, reply) = handler(&body, index);
            let head = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                reply.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(reply.as_bytes());
            let _ = stream.flush();
        }
    });
    MockServer { url, seen }
}

/// Chat-completion response with the given content.
pub fn chat_reply(content: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": content}}],
        "usage": {"total_tokens": 7}
    })
    .to_string()
}

pub fn offline_engine(config: StructureConfig) -> Engine {
    Engine::new(
        MemoryState::new(DIM, config.knn_k),
        config,
        SEED,
        Arc::new(DeterministicEmbedder::new(DIM, SEED).unwrap()),
        Arc::new(RuleBasedProvider::default()),
    )
    .unwrap()
}

pub fn fixture_conversation() -> Conversation {
    synthetic_fixture().conversation
}

/// The bundled fixture ingested offline with default structure settings.
pub fn fixture_state() -> MemoryState {
    let mut e = offline_engine(StructureConfig::default());
    e.ingest(&fixture_conversation()).unwrap();
    e.into_state()
}
