use std::io::Cursor;
use std::time::Duration;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{PriorError, PriorImage};
use crate::http::{b64_decode, b64_encode, JsonClient};

pub const DETECTOR_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[default]
    WhiteOnBlack,
    BlackOnWhite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    #[default]
    Lineart,
    Hed,
    Sketch,
}

impl DetectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::Lineart => "lineart",
            DetectorKind::Hed => "hed",
            DetectorKind::Sketch => "sketch",
        }
    }
}

/// An out-of-process prior detector (line art, HED, sketch).
pub trait PriorDetector: Send + Sync {
    fn name(&self) -> &str;
    /// Raw detector output: PNG bytes and the polarity they are drawn in.
    fn detect(&self, image: &RgbImage) -> Result<(Vec<u8>, Polarity), PriorError>;
}

/// Runs `detector` and normalizes its output to a white-on-black prior of the
/// input's dimensions.
pub fn external_prior(image: &RgbImage, detector: &dyn PriorDetector) -> Result<PriorImage, PriorError> {
    let (png, polarity) = detector.detect(image)?;
    normalize_prior(&png, polarity, image.dimensions())
}

pub fn normalize_prior(png: &[u8], polarity: Polarity, expected: (u32, u32)) -> Result<PriorImage, PriorError> {
    let decoded = image::load_from_memory(png).map_err(|e| PriorError::Decode(e.to_string()))?;
    let gray = decoded.to_luma16();
    if gray.dimensions() != expected {
        return Err(PriorError::DimensionMismatch { expected, got: gray.dimensions() });
    }
    let values = gray
        .pixels()
        .map(|p| {
            let v = p[0] as f64 / u16::MAX as f64;
            match polarity {
                Polarity::WhiteOnBlack => v,
                Polarity::BlackOnWhite => 1.0 - v,
            }
        })
        .collect();
    Ok(PriorImage::from_values(expected.0, expected.1, values).expect("dimensions checked"))
}

/// Detector service: `POST {base}/prior` with `{"image_png_b64", "kind"}`,
/// answering `{"prior_png_b64", "polarity"}`.
#[derive(Debug, Clone)]
pub struct HttpDetector {
    client: JsonClient,
    kind: DetectorKind,
}

#[derive(Deserialize)]
struct PriorResponse {
    prior_png_b64: String,
    #[serde(default)]
    polarity: Polarity,
}

impl HttpDetector {
    pub fn new(base: &str, kind: DetectorKind) -> Self {
        Self { client: JsonClient::new(base, DETECTOR_TIMEOUT), kind }
    }
}

impl PriorDetector for HttpDetector {
    fn name(&self) -> &str {
        self.kind.as_str()
    }

    fn detect(&self, image: &RgbImage) -> Result<(Vec<u8>, Polarity), PriorError> {
        let mut png = Vec::new();
        image
            .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| PriorError::Decode(e.to_string()))?;
        let body = serde_json::json!({ "image_png_b64": b64_encode(&png), "kind": self.kind.as_str() });
        let response: PriorResponse = self.client.post("prior", &body)?;
        let bytes = b64_decode(&response.prior_png_b64).map_err(|e| PriorError::Decode(e.to_string()))?;
        Ok((bytes, response.polarity))
    }
}
