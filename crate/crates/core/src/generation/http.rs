use std::time::{Duration, Instant};

use serde::Deserialize;

use super::{Backend, GenerationError, GenerationRequest, GenerationResult};
use crate::http::{b64_decode, b64_encode, HttpError, JsonClient};

pub const GENERATE_TIMEOUT: Duration = Duration::from_secs(120);

/// Retries after the first attempt, waiting `base_delay * 2^k` before retry `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { retries: 3, base_delay: Duration::from_secs(1) }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry)
    }
}

/// Generation service: `POST {base}/generate`, answering `{"image_png_b64"}`
/// on success and a non-200 status with `{"error"}` otherwise.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: JsonClient,
    retry: RetryPolicy,
    id: String,
    extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Deserialize)]
struct GenerateResponse {
    image_png_b64: String,
}

impl HttpBackend {
    pub fn new(base: &str) -> Self {
        Self::with_options(base, GENERATE_TIMEOUT, RetryPolicy::default())
    }

    pub fn with_options(base: &str, timeout: Duration, retry: RetryPolicy) -> Self {
        let client = JsonClient::new(base, timeout);
        let id = format!("http:{}", client.base());
        Self { client, retry, id, extra: serde_json::Map::new() }
    }

    /// Additional top-level request fields. They never override the core fields.
    pub fn with_extra(mut self, extra: serde_json::Map<String, serde_json::Value>) -> Self {
        self.extra = extra;
        self
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<GenerateResponse, HttpError> {
        self.client.post("generate", body)
    }
}

fn request_body(request: &GenerationRequest, extra: &serde_json::Map<String, serde_json::Value>) -> serde_json::Value {
    let mut body = serde_json::json!({
        "prompt": request.prompt,
        "control_png_b64": b64_encode(&request.control_png),
        "control_kind": request.control_kind,
        "width": request.width,
        "height": request.height,
        "steps": request.steps,
        "seed": request.seed,
    });
    if let Some(map) = body.as_object_mut() {
        for (k, v) in extra {
            map.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }
    body
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GenerationError> {
        request.validate()?;
        let body = request_body(request, &self.extra);
        let started = Instant::now();
        let mut retry = 0;
        let response = loop {
            match self.attempt(&body) {
                Ok(r) => break r,
                Err(e) if e.is_retryable() && retry < self.retry.retries => {
                    log::warn!("generate attempt {} failed: {e}; retrying", retry + 1);
                    std::thread::sleep(self.retry.delay(retry));
                    retry += 1;
                }
                Err(HttpError::Transport { reason, .. }) => return Err(GenerationError::Transport(reason)),
                Err(HttpError::Status { status, excerpt, .. }) => {
                    return Err(GenerationError::Backend { status, excerpt })
                }
                Err(HttpError::Malformed { reason, .. }) => return Err(GenerationError::Malformed(reason)),
            }
        };
        let image_png = b64_decode(&response.image_png_b64).map_err(|e| GenerationError::Malformed(e.to_string()))?;
        let result = GenerationResult {
            image_png,
            backend_id: self.id.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
        };
        result.decode_checked(request)?;
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_backoff_schedule() {
        let p = RetryPolicy::default();
        assert_eq!(p.retries, 3);
        assert_eq!((0..3).map(|k| p.delay(k).as_secs()).collect::<Vec<_>>(), vec![1, 2, 4]);
    }

    #[test]
    fn body_has_wire_fields() {
        let req = GenerationRequest {
            prompt: "p".into(),
            control_png: vec![1, 2, 3],
            width: 4,
            height: 5,
            steps: 30,
            seed: u64::MAX,
            control_kind: "lineart".into(),
        };
        let body = request_body(&req, &serde_json::Map::new());
        assert_eq!(body["control_png_b64"], "AQID");
        assert_eq!(body["seed"].as_u64(), Some(u64::MAX));
        assert_eq!(body["steps"], 30);
        assert_eq!(body["control_kind"], "lineart");
    }
}
