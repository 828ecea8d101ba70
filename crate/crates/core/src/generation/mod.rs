//! Controllable generation backends and plan execution.

mod execute;
mod http;
mod mock;

pub use execute::{
    compute_priors, execute_plan, reconcile_manifest, ExecuteError, ExecuteOptions, ExecutionReport, FailureRecord,
    Services, FAILURES_FILE,
};
pub use http::{HttpBackend, RetryPolicy, GENERATE_TIMEOUT};
pub use mock::{mock_generate, pattern_byte, MockBackend};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_STEPS: u32 = 30;
pub const DEFAULT_CONTROL_KIND: &str = "lineart";

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("backend unreachable: {0}")]
    Transport(String),
    #[error("backend error (HTTP {status}): {excerpt}")]
    Backend { status: u16, excerpt: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("generated image is {got:?} but {expected:?} was requested")]
    DimensionMismatch { expected: (u32, u32), got: (u32, u32) },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    /// Grayscale PNG of the blended prior.
    #[serde(skip)]
    pub control_png: Vec<u8>,
    pub width: u32,
    pub height: u32,
    pub steps: u32,
    pub seed: u64,
    pub control_kind: String,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.steps < 1 {
            return Err(GenerationError::InvalidRequest("steps must be at least 1".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GenerationError::InvalidRequest("dimensions must be positive".into()));
        }
        let dims = image::load_from_memory(&self.control_png)
            .map(|img| (img.width(), img.height()))
            .map_err(|e| GenerationError::InvalidRequest(format!("control image: {e}")))?;
        if dims != (self.width, self.height) {
            return Err(GenerationError::InvalidRequest(format!(
                "control image is {dims:?} but request is {:?}",
                (self.width, self.height)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationResult {
    pub image_png: Vec<u8>,
    pub backend_id: String,
    pub latency_ms: u64,
}

impl GenerationResult {
    /// Decodes the image and enforces the requested dimensions.
    pub fn decode_checked(&self, request: &GenerationRequest) -> Result<image::RgbImage, GenerationError> {
        let img = image::load_from_memory(&self.image_png)
            .map_err(|e| GenerationError::Malformed(format!("undecodable image: {e}")))?
            .to_rgb8();
        if img.dimensions() != (request.width, request.height) {
            return Err(GenerationError::DimensionMismatch {
                expected: (request.width, request.height),
                got: img.dimensions(),
            });
        }
        Ok(img)
    }
}

/// A controllable text+image-to-image generator. Implementations must allow
/// concurrent calls.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GenerationError>;
}

/// Post-generation filter hook; rejected results are recorded as failures.
pub trait ResultFilter: Send + Sync {
    fn accept(&self, result: &GenerationResult) -> bool;
}

pub struct AcceptAll;

impl ResultFilter for AcceptAll {
    fn accept(&self, _: &GenerationResult) -> bool {
        true
    }
}
