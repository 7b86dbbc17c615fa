//! Minimal blocking JSON-over-HTTP client shared by the remote providers.

use std::ops::Range;
use std::time::Duration;

use ureq::Agent;

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct JsonClient {
    agent: Agent,
    url: String,
    api_key: Option<String>,
}

impl std::fmt::Debug for JsonClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JsonClient")
            .field("url", &self.url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<set>"))
            .finish()
    }
}

impl JsonClient {
    pub fn new(url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        JsonClient {
            agent,
            url: url.into(),
            api_key,
        }
    }

    /// Reads the bearer token from `var`, if set and non-empty.
    pub fn key_from_env(var: &str) -> Option<String> {
        std::env::var(var).ok().filter(|k| !k.trim().is_empty())
    }

    /// POSTs `body` and returns the parsed JSON response. `range` names the
    /// batch items this request covers so errors can point at them.
    pub fn post(&self, body: &serde_json::Value, range: Range<usize>) -> Result<serde_json::Value> {
        let mut req = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let payload = serde_json::to_string(body)?;
        let mut resp = req.send(payload).map_err(|e| Error::Retryable {
            range: range.clone(),
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Retryable {
                range: range.clone(),
                message: e.to_string(),
            })?;
        if status == 429 || status >= 500 {
            return Err(Error::Retryable {
                range,
                message: format!("http status {status}"),
            });
        }
        if !(200..300).contains(&status) {
            return Err(Error::protocol(
                range,
                format!("http status {status}"),
                Some(text),
            ));
        }
        serde_json::from_str(&text)
            .map_err(|e| Error::protocol(range, format!("response is not json: {e}"), Some(text)))
    }
}
