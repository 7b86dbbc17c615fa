//! Chat-completion wire client.
//!
//! Request: `{"model", "messages": [{"role", "content"}], "temperature": 0.0}`.
//! Response: the first choice's `message.content`, plus `usage.total_tokens`
//! and per-token `logprobs` when the service returns them.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::http::JsonClient;

pub const CHAT_API_KEY_VAR: &str = "HIERMEM_CHAT_API_KEY";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChatConfig {
    pub url: String,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub content: String,
    pub total_tokens: Option<u64>,
    /// For each generated token, the log-probabilities of its top
    /// alternatives (including itself).
    pub top_logprobs: Option<Vec<Vec<f64>>>,
}

impl ChatReply {
    /// Mean per-token entropy (nats) over the renormalised top alternatives.
    pub fn mean_token_entropy(&self) -> Option<f64> {
        let tokens = self.top_logprobs.as_ref()?;
        if tokens.is_empty() {
            return None;
        }
        let total: f64 = tokens
            .iter()
            .map(|alts| {
                let probs: Vec<f64> = alts.iter().map(|lp| lp.exp()).collect();
                let z: f64 = probs.iter().sum();
                if z <= 0.0 {
                    return 0.0;
                }
                probs
                    .iter()
                    .map(|p| p / z)
                    .filter(|p| *p > 0.0)
                    .map(|p| -p * p.ln())
                    .sum::<f64>()
            })
            .sum();
        Some(total / tokens.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct ChatClient {
    config: ChatConfig,
    client: JsonClient,
}

impl ChatClient {
    pub fn new(config: ChatConfig) -> Self {
        let key = JsonClient::key_from_env(CHAT_API_KEY_VAR);
        Self::with_key(config, key)
    }

    pub fn with_key(config: ChatConfig, api_key: Option<String>) -> Self {
        let client = JsonClient::new(
            config.url.clone(),
            api_key,
            Duration::from_secs(config.timeout_secs),
        );
        ChatClient { config, client }
    }

    pub fn model(&self) -> &str {
        &self.config.model
    }

    pub fn complete(&self, prompt: &str, want_logprobs: bool) -> Result<ChatReply> {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0.0,
        });
        if want_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(5);
        }
        let resp = self.client.post(&body, 0..1)?;
        parse_chat_response(&resp)
    }
}

pub fn parse_chat_response(resp: &Value) -> Result<ChatReply> {
    let fail = |msg: &str| Error::protocol(0..1, msg.to_string(), Some(resp.to_string()));
    let choice = resp
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .ok_or_else(|| fail("missing choices[0]"))?;
    let content = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| fail("missing choices[0].message.content"))?
        .to_string();
    let total_tokens = resp.pointer("/usage/total_tokens").and_then(Value::as_u64);
    let top_logprobs = choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
        .map(|toks| {
            toks.iter()
                .map(|t| {
                    let alts: Vec<f64> = t
                        .get("top_logprobs")
                        .and_then(Value::as_array)
                        .map(|a| {
                            a.iter()
                                .filter_map(|x| x.get("logprob").and_then(Value::as_f64))
                                .collect()
                        })
                        .unwrap_or_default();
                    if alts.is_empty() {
                        t.get("logprob")
                            .and_then(Value::as_f64)
                            .into_iter()
                            .collect()
                    } else {
                        alts
                    }
                })
                .collect()
        });
    Ok(ChatReply {
        content,
        total_tokens,
        top_logprobs,
    })
}

/// Parses a reply that must be a single JSON object, without repair.
pub fn parse_json_object(content: &str) -> Result<serde_json::Map<String, Value>> {
    match serde_json::from_str::<Value>(content.trim()) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(Error::protocol(
            0..1,
            "expected a JSON object",
            Some(content.to_string()),
        )),
        Err(e) => Err(Error::protocol(
            0..1,
            format!("reply is not JSON: {e}"),
            Some(content.to_string()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_content_usage_and_logprobs() {
        let resp = json!({
            "choices": [{
                "message": {"role": "assistant", "content": "Paris"},
                "logprobs": {"content": [
                    {"token": "Paris", "logprob": -0.1,
                     "top_logprobs": [{"logprob": (0.5f64).ln()}, {"logprob": (0.5f64).ln()}]}
                ]}
            }],
            "usage": {"total_tokens": 42}
        });
        let r = parse_chat_response(&resp).unwrap();
        assert_eq!(r.content, "Paris");
        assert_eq!(r.total_tokens, Some(42));
        // two equally likely alternatives: entropy ln 2
        assert!((r.mean_token_entropy().unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_missing_content() {
        assert!(parse_chat_response(&json!({"choices": []})).is_err());
        assert!(parse_chat_response(&json!({"choices": [{"message": {}}]})).is_err());
    }

    #[test]
    fn json_object_is_strict() {
        assert!(parse_json_object(r#" {"split": true} "#).is_ok());
        assert!(parse_json_object("```json\n{\"split\": true}\n```").is_err());
        match parse_json_object("[1]") {
            Err(Error::Protocol { raw, .. }) => assert_eq!(raw.as_deref(), Some("[1]")),
            other => panic!("{other:?}"),
        }
    }
}
