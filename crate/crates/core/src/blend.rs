//! Weighted blending of the image prior with the mask prior, and export of the
//! result as the generator's control image.

use std::io::Cursor;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prior::{Polarity, PriorImage};

#[derive(Debug, Error)]
pub enum BlendError {
    #[error("image prior is {image:?} but mask prior is {mask:?}")]
    DimensionMismatch { image: (u32, u32), mask: (u32, u32) },
    #[error("blend weights must be finite and non-negative, got ({0}, {1})")]
    InvalidWeights(f64, f64),
    #[error("PNG encoding failed: {0}")]
    Encode(String),
    #[error("PNG decoding failed: {0}")]
    Decode(String),
}

/// `w1` scales the image prior, `w2` the mask prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for BlendWeights {
    fn default() -> Self {
        Self { w1: 0.7, w2: 0.9 }
    }
}

impl BlendWeights {
    pub fn new(w1: f64, w2: f64) -> Result<Self, BlendError> {
        let w = Self { w1, w2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), BlendError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.w1) && ok(self.w2) {
            Ok(())
        } else {
            Err(BlendError::InvalidWeights(self.w1, self.w2))
        }
    }
}

/// `clamp(w1 * image + w2 * mask, 0, 1)` per pixel.
pub fn blend_priors(image: &PriorImage, mask: &PriorImage, w: BlendWeights) -> Result<PriorImage, BlendError> {
    w.validate()?;
    if image.dimensions() != mask.dimensions() {
        return Err(BlendError::DimensionMismatch { image: image.dimensions(), mask: mask.dimensions() });
    }
    let values =
        image.values().iter().zip(mask.values()).map(|(&a, &b)| (w.w1 * a + w.w2 * b).clamp(0.0, 1.0)).collect();
    Ok(PriorImage::from_values(image.width(), image.height(), values).expect("dimensions checked"))
}

/// 8-bit grayscale PNG, `round(255 v)`, inverted first for black-on-white.
pub fn export_control_image(prior: &PriorImage, polarity: Polarity) -> Result<Vec<u8>, BlendError> {
    let gray = GrayImage::from_fn(prior.width(), prior.height(), |x, y| {
        let v = match polarity {
            Polarity::WhiteOnBlack => prior.get(x, y),
            Polarity::BlackOnWhite => 1.0 - prior.get(x, y),
        };
        Luma([(255.0 * v).round() as u8])
    });
    let mut png = Vec::new();
    gray.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| BlendError::Encode(e.to_string()))?;
    Ok(png)
}

/// Inverse of [`export_control_image`] up to 8-bit quantization.
pub fn import_control_image(png: &[u8], polarity: Polarity) -> Result<PriorImage, BlendError> {
    let gray = image::load_from_memory(png).map_err(|e| BlendError::Decode(e.to_string()))?.to_luma8();
    let values = gray
        .pixels()
        .map(|p| {
            let v = p[0] as f64 / 255.0;
            match polarity {
                Polarity::WhiteOnBlack => v,
                Polarity::BlackOnWhite => 1.0 - v,
            }
        })
        .collect();
    PriorImage::from_values(gray.width(), gray.height(), values).ok_or_else(|| BlendError::Decode("empty image".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(v: f64) -> PriorImage {
        PriorImage::from_values(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn default_weight_arithmetic() {
        let w = BlendWeights::default();
        let out = blend_priors(&single(0.5), &single(0.5), w).unwrap();
        assert!((out.get(0, 0) - 0.8).abs() < 1e-12);
        let out = blend_priors(&single(0.8), &single(0.9), w).unwrap();
        assert_eq!(out.get(0, 0), 1.0);
    }

    #[test]
    fn identity_weights() {
        let v = PriorImage::from_values(3, 1, vec![0.1, 0.5, 0.9]).unwrap();
        let m = PriorImage::from_values(3, 1, vec![1.0, 0.3, 0.0]).unwrap();
        assert_eq!(blend_priors(&v, &m, BlendWeights::new(1.0, 0.0).unwrap()).unwrap(), v);
        assert_eq!(blend_priors(&v, &PriorImage::zeros(3, 1), BlendWeights::new(1.0, 0.0).unwrap()).unwrap(), v);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            blend_priors(&PriorImage::zeros(2, 2), &PriorImage::zeros(2, 3), BlendWeights::default()),
            Err(BlendError::DimensionMismatch { .. })
        ));
        assert!(BlendWeights::new(-0.1, 0.9).is_err());
        assert!(BlendWeights::new(f64::NAN, 0.9).is_err());
        assert!(BlendWeights::new(0.7, f64::INFINITY).is_err());
    }

    #[test]
    fn export_polarity() {
        let on = single(1.0);
        let png = export_control_image(&on, Polarity::WhiteOnBlack).unwrap();
        assert_eq!(image::load_from_memory(&png).unwrap().to_luma8().get_pixel(0, 0)[0], 255);
        let png = export_control_image(&on, Polarity::BlackOnWhite).unwrap();
        assert_eq!(image::load_from_memory(&png).unwrap().to_luma8().get_pixel(0, 0)[0], 0);
    }

    fn unit_grid() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..=1.0, 16)
    }

    proptest! {
        #[test]
        fn export_import_within_one_step(values in unit_grid(), invert in any::<bool>()) {
            let polarity = if invert { Polarity::BlackOnWhite } else { Polarity::WhiteOnBlack };
            let prior = PriorImage::from_values(4, 4, values).unwrap();
            let back = import_control_image(&export_control_image(&prior, polarity).unwrap(), polarity).unwrap();
            for (a, b) in prior.values().iter().zip(back.values()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }

        #[test]
        fn monotone_and_bounded(a in unit_grid(), b in unit_grid(), bump in 0.0f64..0.5, i in 0usize..16,
                                w1 in 0.0f64..3.0, w2 in 0.0f64..3.0) {
            let w = BlendWeights::new(w1, w2).unwrap();
            let img = PriorImage::from_values(4, 4, a.clone()).unwrap();
            let mask = PriorImage::from_values(4, 4, b.clone()).unwrap();
            let base = blend_priors(&img, &mask, w).unwrap();
            prop_assert!(base.values().iter().all(|v| (0.0..=1.0).contains(v)));
            let mut a2 = a.clone();
            a2[i] = (a2[i] + bump).min(1.0);
            let mut b2 = b;
            b2[i] = (b2[i] + bump).min(1.0);
            let up = blend_priors(&PriorImage::from_values(4, 4, a2).unwrap(), &PriorImage::from_values(4, 4, b2).unwrap(), w).unwrap();
            prop_assert!(up.values()[i] >= base.values()[i]);
        }

        #[test]
        fn saturated_mask_edges_stay_strong(a in unit_grid(), w1 in 0.0f64..2.0, w2 in 0.9f64..2.0) {
            let img = PriorImage::from_values(4, 4, a).unwrap();
            let mask = PriorImage::from_values(4, 4, vec![1.0; 16]).unwrap();
            let out = blend_priors(&img, &mask, BlendWeights::new(w1, w2).unwrap()).unwrap();
            prop_assert!(out.values().iter().all(|&v| v >= 0.9));
        }
    }
}
