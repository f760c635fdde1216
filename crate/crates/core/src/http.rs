//! Blocking JSON POST with bounded retries, shared by the chat and embedding clients.

use std::thread;
use std::time::Duration;

use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum HttpError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("undecodable response body: {0}")]
    Decode(String),
}

impl HttpError {
    pub fn attempts(&self) -> Option<u32> {
        match self {
            HttpError::Transport { attempts, .. } => Some(*attempts),
            _ => None,
        }
    }
}

#[derive(Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Duration,
}

impl JsonClient {
    pub fn new(timeout: Duration, max_retries: u32, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            api_key,
            max_retries,
            backoff: Duration::from_millis(200),
        }
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    /// POSTs `body` and parses the JSON reply. Transport errors, 429 and 5xx
    /// are retried up to `max_retries` extra times; other statuses fail at once.
    pub fn post(&self, url: &str, body: &Value) -> Result<Value, HttpError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let mut req = self.agent.post(url).header("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let retryable = match req.send(body.to_string()) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| HttpError::Decode(e.to_string()))?;
                    if (200..300).contains(&status) {
                        return serde_json::from_str(&text).map_err(|e| HttpError::Decode(e.to_string()));
                    }
                    let err = HttpError::Status { status, body: text };
                    if status == 429 || status >= 500 {
                        err
                    } else {
                        return Err(err);
                    }
                }
                Err(e) => HttpError::Transport {
                    attempts,
                    message: e.to_string(),
                },
            };
            if attempts > self.max_retries {
                return Err(match retryable {
                    HttpError::Transport { message, .. } => HttpError::Transport { attempts, message },
                    other => other,
                });
            }
            log::debug!("retrying {url} after attempt {attempts}: {retryable}");
            thread::sleep(self.backoff * 2u32.saturating_pow(attempts - 1).min(16));
        }
    }
}
