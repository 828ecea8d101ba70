//! Minimal JSON-over-HTTP plumbing shared by the service clients.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use thiserror::Error;

const MAX_BODY: u64 = 256 * 1024 * 1024;
const EXCERPT_LEN: usize = 200;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("transport error calling {url}: {reason}")]
    Transport { url: String, reason: String },
    #[error("{url} returned HTTP {status}: {excerpt}")]
    Status { url: String, status: u16, excerpt: String },
    #[error("malformed response from {url}: {reason}")]
    Malformed { url: String, reason: String },
}

impl HttpError {
    /// Transport failures and 5xx responses are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            HttpError::Transport { .. } => true,
            HttpError::Status { status, .. } => *status >= 500,
            HttpError::Malformed { .. } => false,
        }
    }
}

#[derive(Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    base: String,
}

impl std::fmt::Debug for JsonClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JsonClient").field("base", &self.base).finish()
    }
}

impl JsonClient {
    pub fn new(base: &str, timeout: Duration) -> Self {
        let agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        Self { agent, base: base.trim_end_matches('/').to_string() }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    /// POSTs `body` to `{base}/{path}` and parses a 200 response as JSON.
    pub fn post<T: serde::de::DeserializeOwned>(&self, path: &str, body: &serde_json::Value) -> Result<T, HttpError> {
        let url = format!("{}/{}", self.base, path);
        let payload = body.to_string();
        let mut response = self
            .agent
            .post(&url)
            .content_type("application/json")
            .send(payload.as_str())
            .map_err(|e| HttpError::Transport { url: url.clone(), reason: e.to_string() })?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .with_config()
            .limit(MAX_BODY)
            .read_to_string()
            .map_err(|e| HttpError::Transport { url: url.clone(), reason: e.to_string() })?;
        if status != 200 {
            return Err(HttpError::Status { url, status, excerpt: error_excerpt(&text) });
        }
        serde_json::from_str(&text).map_err(|e| HttpError::Malformed { url, reason: e.to_string() })
    }
}

/// Prefers the `error` field of a JSON error payload, else the raw body, truncated.
fn error_excerpt(body: &str) -> String {
    let msg = serde_json::from_str::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_string))
        .unwrap_or_else(|| body.trim().to_string());
    msg.chars().take(EXCERPT_LEN).collect()
}

pub fn b64_encode(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn b64_decode(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
    STANDARD.decode(text.trim())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn excerpt_prefers_error_field() {
        assert_eq!(error_excerpt(r#"{"error": "out of memory"}"#), "out of memory");
        assert_eq!(error_excerpt("  plain failure \n"), "plain failure");
        assert_eq!(error_excerpt(&"x".repeat(1000)).len(), EXCERPT_LEN);
    }

    #[test]
    fn retry_classification() {
        let status = |s| HttpError::Status { url: String::new(), status: s, excerpt: String::new() };
        assert!(status(500).is_retryable());
        assert!(status(503).is_retryable());
        assert!(!status(400).is_retryable());
        assert!(HttpError::Transport { url: String::new(), reason: String::new() }.is_retryable());
    }
}
