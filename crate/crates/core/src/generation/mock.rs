use image::{Rgb, RgbImage};

use super::{Backend, GenerationError, GenerationRequest, GenerationResult};
use crate::hash::stable_hash;

/// Byte of `key` selected by pixel position; tiles with period 8.
pub fn pattern_byte(key: u64, x: u32, y: u32) -> u8 {
    let shift = 8 * ((x + 3 * y) % 8);
    (key >> shift) as u8
}

/// Deterministic stand-in for a diffusion service. Red carries the control
/// image, green a pattern keyed by the prompt hash, blue a pattern keyed by
/// the request seed.
pub fn mock_generate(request: &GenerationRequest) -> Result<GenerationResult, GenerationError> {
    request.validate()?;
    let control = image::load_from_memory(&request.control_png)
        .map_err(|e| GenerationError::InvalidRequest(e.to_string()))?
        .to_luma8();
    let prompt_key = stable_hash(&request.prompt);
    let img = RgbImage::from_fn(request.width, request.height, |x, y| {
        Rgb([control.get_pixel(x, y)[0], pattern_byte(prompt_key, x, y), pattern_byte(request.seed, x, y)])
    });
    let mut png = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| GenerationError::Malformed(e.to_string()))?;
    Ok(GenerationResult { image_png: png, backend_id: "mock".into(), latency_ms: 0 })
}

#[derive(Debug, Default, Clone, Copy)]
pub struct MockBackend;

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GenerationError> {
        mock_generate(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    fn request(prompt: &str, control: &GrayImage, seed: u64) -> GenerationRequest {
        let mut png = Vec::new();
        control.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png).unwrap();
        GenerationRequest {
            prompt: prompt.into(),
            control_png: png,
            width: control.width(),
            height: control.height(),
            steps: 30,
            seed,
            control_kind: "lineart".into(),
        }
    }

    fn decode(r: &GenerationResult) -> RgbImage {
        image::load_from_memory(&r.image_png).unwrap().to_rgb8()
    }

    #[test]
    fn repeatable() {
        let control = GrayImage::from_fn(9, 7, |x, y| Luma([(x * y) as u8]));
        let req = request("a dog; dog", &control, 17);
        assert_eq!(mock_generate(&req).unwrap(), mock_generate(&req).unwrap());
    }

    #[test]
    fn prompt_only_changes_green() {
        let control = GrayImage::from_fn(9, 7, |x, y| Luma([(x * 13 + y) as u8]));
        let a = decode(&mock_generate(&request("a dog; dog", &control, 5)).unwrap());
        let b = decode(&mock_generate(&request("a cat; cat", &control, 5)).unwrap());
        let mut green_differs = false;
        for (pa, pb) in a.pixels().zip(b.pixels()) {
            assert_eq!(pa[0], pb[0]);
            assert_eq!(pa[2], pb[2]);
            green_differs |= pa[1] != pb[1];
        }
        assert!(green_differs);
    }

    #[test]
    fn zero_control_zero_red() {
        let control = GrayImage::new(8, 8);
        let img = decode(&mock_generate(&request("x", &control, 1)).unwrap());
        assert!(img.pixels().all(|p| p[0] == 0));
    }

    #[test]
    fn green_is_fnv_pattern() {
        // FNV-1a 64 of "foobar" is 0x85944171f73967e8 (published test vector).
        let control = GrayImage::new(8, 1);
        let img = decode(&mock_generate(&request("foobar", &control, 0)).unwrap());
        let expected = 0x85944171f73967e8u64.to_le_bytes();
        for x in 0..8 {
            assert_eq!(img.get_pixel(x, 0)[1], expected[x as usize]);
        }
    }

    #[test]
    fn rejects_mismatched_control() {
        let control = GrayImage::new(8, 8);
        let mut req = request("x", &control, 1);
        req.width = 9;
        assert!(matches!(mock_generate(&req), Err(GenerationError::InvalidRequest(_))));
        let mut req = request("x", &control, 1);
        req.steps = 0;
        assert!(mock_generate(&req).is_err());
    }
}
