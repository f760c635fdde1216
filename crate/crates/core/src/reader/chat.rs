use std::time::Duration;

use serde_json::{json, Value};

use super::{Decoding, ReaderError};
use crate::http::JsonClient;

/// OpenAI-compatible `chat/completions` client. `endpoint` is the full URL.
#[derive(Clone)]
pub struct ChatClient {
    endpoint: String,
    client: JsonClient,
}

impl ChatClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_retries: u32, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            client: JsonClient::new(timeout, max_retries, api_key),
        }
    }

    pub fn with_client(endpoint: impl Into<String>, client: JsonClient) -> Self {
        Self {
            endpoint: endpoint.into(),
            client,
        }
    }

    pub fn request_body(prompt: &str, model: &str, decoding: &Decoding) -> Value {
        json!({
            "model": model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": decoding.temperature,
            "max_tokens": decoding.max_output_tokens,
        })
    }

    /// Returns the first choice's message content; a null or missing
    /// content is an empty answer, not an error.
    pub fn complete(&self, prompt: &str, model: &str, decoding: &Decoding) -> Result<String, ReaderError> {
        let resp = self
            .client
            .post(&self.endpoint, &Self::request_body(prompt, model, decoding))?;
        parse_completion(&resp)
    }
}

pub(crate) fn parse_completion(resp: &Value) -> Result<String, ReaderError> {
    let first = resp
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .ok_or_else(|| ReaderError::Protocol("response has no choices".into()))?;
    Ok(first
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .trim()
        .to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_shape() {
        let b = ChatClient::request_body("hi", "m", &Decoding::default());
        assert_eq!(b["model"], "m");
        assert_eq!(b["messages"][0]["role"], "user");
        assert_eq!(b["messages"][0]["content"], "hi");
        assert_eq!(b["temperature"], 0.0);
        assert_eq!(b["max_tokens"], 64);
    }

    #[test]
    fn parses_first_choice() {
        let r = json!({"choices": [{"message": {"role": "assistant", "content": " Paris \n"}}, {"message": {"content": "x"}}]});
        assert_eq!(parse_completion(&r).unwrap(), "Paris");
        let empty = json!({"choices": [{"message": {"content": null}}]});
        assert_eq!(parse_completion(&empty).unwrap(), "");
        assert!(parse_completion(&json!({"choices": []})).is_err());
    }
}
