//! Plumbing shared by remote model clients: error type, in-flight limits and
//! a JSON-over-HTTP POST with the retry policy (one retry on transport errors
//! and 5xx, none on 4xx or timeouts).

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::metering::count_tokens;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend timed out after {0:?}")]
    Timeout(Duration),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("backend returned a malformed response: {0}")]
    BadResponse(String),
}

impl BackendError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, BackendError::Timeout(_))
    }
}

/// Counting semaphore capping concurrent calls into one backend.
#[derive(Debug)]
pub struct InFlightLimit {
    max: Option<usize>,
    in_use: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimit {
    /// `None` means unlimited.
    pub fn new(max: Option<usize>) -> Self {
        Self {
            max: max.map(|m| m.max(1)),
            in_use: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn max(&self) -> Option<usize> {
        self.max
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_use.lock().unwrap();
        if let Some(max) = self.max {
            while *n >= max {
                n = self.freed.wait(n).unwrap();
            }
        }
        *n += 1;
        Permit { limit: self }
    }

    pub fn in_use(&self) -> usize {
        *self.in_use.lock().unwrap()
    }
}

pub struct Permit<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limit.in_use.lock().unwrap() -= 1;
        self.limit.freed.notify_one();
    }
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_retries() -> u32 {
    1
}

/// Where and how to reach a remote model endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpSettings {
    pub base_url: String,
    /// Bearer token, resolved from the environment by the caller.
    #[serde(skip)]
    pub auth_token: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

impl HttpSettings {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            auth_token: None,
            timeout_secs: default_timeout_secs(),
            retries: default_retries(),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

/// Blocking JSON POST client with the shared retry policy.
#[derive(Debug)]
pub struct JsonPoster {
    settings: HttpSettings,
    client: reqwest::blocking::Client,
}

impl JsonPoster {
    pub fn new(settings: HttpSettings) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.timeout())
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self { settings, client })
    }

    pub fn settings(&self) -> &HttpSettings {
        &self.settings
    }

    pub fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let mut attempt = 0;
        loop {
            match self.post_once(body) {
                Ok(v) => return Ok(v),
                Err(e) if attempt < self.settings.retries && retryable(&e) => attempt += 1,
                Err(e) => return Err(e),
            }
        }
    }

    fn post_once(&self, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.client.post(&self.settings.base_url).json(body);
        if let Some(token) = &self.settings.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| self.transport_error(e))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| self.transport_error(e))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::BadResponse(e.to_string()))
    }

    fn transport_error(&self, e: reqwest::Error) -> BackendError {
        if e.is_timeout() {
            BackendError::Timeout(self.settings.timeout())
        } else {
            BackendError::Unavailable(e.to_string())
        }
    }
}

fn retryable(e: &BackendError) -> bool {
    match e {
        BackendError::Unavailable(_) => true,
        BackendError::Status { status, .. } => *status >= 500,
        BackendError::Timeout(_) | BackendError::BadResponse(_) => false,
    }
}

/// Text returned by a completion call with its token usage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Client for the common chat-completion JSON shape.
#[derive(Debug)]
pub struct ChatClient {
    poster: JsonPoster,
    model: Option<String>,
    limit: InFlightLimit,
}

impl ChatClient {
    pub fn new(settings: HttpSettings, model: Option<String>, max_in_flight: Option<usize>) -> Result<Self, BackendError> {
        Ok(Self {
            poster: JsonPoster::new(settings)?,
            model,
            limit: InFlightLimit::new(max_in_flight),
        })
    }

    /// Sends `messages` (already in `{"role", "content"}` form).
    pub fn chat(&self, messages: Vec<Value>) -> Result<Completion, BackendError> {
        let _permit = self.limit.acquire();
        let mut body = json!({ "messages": messages });
        if let Some(model) = &self.model {
            body["model"] = json!(model);
        }
        let resp = self.poster.post(&body)?;
        let text = resp["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::BadResponse("missing choices[0].message.content".into()))?
            .to_owned();
        let prompt_tokens = resp["usage"]["prompt_tokens"].as_u64();
        let completion_tokens = resp["usage"]["completion_tokens"].as_u64();
        // Fall back to the local splitter when the server reports no usage.
        let prompt_tokens = prompt_tokens.unwrap_or_else(|| {
            messages
                .iter()
                .filter_map(|m| m["content"].as_str())
                .map(count_tokens)
                .sum()
        });
        let completion_tokens = completion_tokens.unwrap_or_else(|| count_tokens(&text));
        Ok(Completion {
            text,
            prompt_tokens,
            completion_tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn limit_caps_concurrency() {
        let limit = Arc::new(InFlightLimit::new(Some(2)));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let limit = limit.clone();
                let peak = peak.clone();
                s.spawn(move || {
                    let _p = limit.acquire();
                    peak.fetch_max(limit.in_use(), Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(limit.in_use(), 0);
    }

    #[test]
    fn retry_policy() {
        assert!(retryable(&BackendError::Unavailable("reset".into())));
        assert!(retryable(&BackendError::Status {
            status: 503,
            body: String::new()
        }));
        assert!(!retryable(&BackendError::Status {
            status: 404,
            body: String::new()
        }));
        assert!(!retryable(&BackendError::Timeout(Duration::from_secs(1))));
    }
}
