//! Visual priors: single-channel structure maps in [0, 1] with lines at 1.0
//! on a 0.0 background.

mod canny;
mod external;

pub use canny::{canny_edges, CannyParams};
pub use external::{external_prior, normalize_prior, DetectorKind, HttpDetector, Polarity, PriorDetector};

use thiserror::Error;

use crate::dataset::{LabelMask, VOID};
use crate::http::HttpError;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("image is empty")]
    EmptyImage,
    #[error("image {width}x{height} is smaller than the {kernel}x{kernel} blur kernel")]
    ImageTooSmall { width: u32, height: u32, kernel: usize },
    #[error("invalid Canny parameters: {0}")]
    InvalidParams(String),
    #[error("prior is {got:?} but the input image is {expected:?}")]
    DimensionMismatch { expected: (u32, u32), got: (u32, u32) },
    #[error("cannot decode prior image: {0}")]
    Decode(String),
    #[error(transparent)]
    Http(#[from] HttpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorImage {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl PriorImage {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self { width, height, values: vec![0.0; width as usize * height as usize] }
    }

    /// Builds a prior from row-major values, clamping each into [0, 1].
    /// NaN becomes 0.
    pub fn from_values(width: u32, height: u32, values: Vec<f64>) -> Option<Self> {
        if width == 0 || height == 0 || values.len() != width as usize * height as usize {
            return None;
        }
        let values = values.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Some(Self { width, height, values })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    /// Number of pixels at exactly 1.0.
    pub fn count_on(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }
}

/// Marks every non-void pixel whose class differs from a non-void 4-neighbor.
pub fn mask_boundaries(mask: &LabelMask) -> PriorImage {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let px = mask.pixels();
    let at = |x: i64, y: i64| px[(y * w + x) as usize];
    let mut values = vec![0.0; px.len()];
    for y in 0..h {
        for x in 0..w {
            let v = at(x, y);
            if v == VOID {
                continue;
            }
            let differs = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                nx >= 0 && ny >= 0 && nx < w && ny < h && {
                    let n = at(nx, ny);
                    n != VOID && n != v
                }
            });
            if differs {
                values[(y * w + x) as usize] = 1.0;
            }
        }
    }
    PriorImage { width: mask.width(), height: mask.height(), values }
}

/// Square max-filter of the given radius. Radius 0 returns the input.
pub fn dilate(prior: &PriorImage, radius: u32) -> PriorImage {
    if radius == 0 {
        return prior.clone();
    }
    let (w, h, r) = (prior.width as i64, prior.height as i64, radius as i64);
    let mut values = vec![0.0; prior.values.len()];
    for y in 0..h {
        for x in 0..w {
            let mut best: f64 = 0.0;
            for ny in (y - r).max(0)..=(y + r).min(h - 1) {
                for nx in (x - r).max(0)..=(x + r).min(w - 1) {
                    best = best.max(prior.values[(ny * w + nx) as usize]);
                }
            }
            values[(y * w + x) as usize] = best;
        }
    }
    PriorImage { width: prior.width, height: prior.height, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_boundary(px: &[u8], w: usize, h: usize) -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = px[y * w + x];
                if v == 255 {
                    continue;
                }
                let mut neighbours = Vec::new();
                if x > 0 {
                    neighbours.push(px[y * w + x - 1]);
                }
                if x + 1 < w {
                    neighbours.push(px[y * w + x + 1]);
                }
                if y > 0 {
                    neighbours.push(px[(y - 1) * w + x]);
                }
                if y + 1 < h {
                    neighbours.push(px[(y + 1) * w + x]);
                }
                if neighbours.iter().any(|&n| n != 255 && n != v) {
                    out[y * w + x] = 1.0;
                }
            }
        }
        out
    }

    #[test]
    fn background_has_no_boundary() {
        let mask = LabelMask::filled(6, 5, 0).unwrap();
        assert_eq!(mask_boundaries(&mask).count_on(), 0);
    }

    #[test]
    fn centred_rectangle_outline_and_ring() {
        let mut px = vec![0u8; 100];
        for y in 3..7 {
            for x in 3..7 {
                px[y * 10 + x] = 1;
            }
        }
        let mask = LabelMask::new(10, 10, px.clone()).unwrap();
        let prior = mask_boundaries(&mask);
        assert_eq!(prior.values(), brute_boundary(&px, 10, 10).as_slice());
        // 12 outline pixels inside, 16 edge-adjacent background pixels outside.
        assert_eq!(prior.count_on(), 28);
        let inner = (0..100).filter(|&i| px[i] == 1 && prior.values()[i] == 1.0).count();
        assert_eq!(inner, 12);
        assert_eq!(prior.get(2, 2), 0.0, "diagonal corners are not 4-neighbours");
    }

    #[test]
    fn touching_classes_marked_on_both_sides() {
        let px: Vec<u8> = (0..16).map(|i| if i % 4 < 2 { 3 } else { 7 }).collect();
        let prior = mask_boundaries(&LabelMask::new(4, 4, px).unwrap());
        for y in 0..4 {
            assert_eq!([prior.get(0, y), prior.get(1, y), prior.get(2, y), prior.get(3, y)], [0.0, 1.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn void_never_marked_nor_marks() {
        let px = vec![0, 255, 5, 0, 255, 5, 0, 255, 5];
        let prior = mask_boundaries(&LabelMask::new(3, 3, px).unwrap());
        assert_eq!(prior.count_on(), 0);
    }

    #[test]
    fn dilation_grows_a_point() {
        let mut p = PriorImage::zeros(5, 5);
        p.values[12] = 1.0;
        assert_eq!(dilate(&p, 1).count_on(), 9);
        assert_eq!(dilate(&p, 0), p);
    }

    fn label() -> impl Strategy<Value = u8> {
        prop_oneof![0u8..6, Just(255u8)]
    }

    proptest! {
        #[test]
        fn boundaries_match_brute_force(px in proptest::collection::vec(label(), 64)) {
            let prior = mask_boundaries(&LabelMask::new(8, 8, px.clone()).unwrap());
            let expected = brute_boundary(&px, 8, 8);
            prop_assert_eq!(prior.values(), expected.as_slice());
        }

        #[test]
        fn boundaries_invariant_under_relabeling(px in proptest::collection::vec(label(), 64), shift in 1u8..6) {
            // bijection on {0..5}, void fixed
            let relabeled: Vec<u8> = px.iter().map(|&v| if v == 255 { v } else { (v + shift) % 6 }).collect();
            let a = mask_boundaries(&LabelMask::new(8, 8, px).unwrap());
            let b = mask_boundaries(&LabelMask::new(8, 8, relabeled).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
