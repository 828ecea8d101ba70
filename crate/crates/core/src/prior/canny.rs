//! Canny edge detection.
//!
//! The chain runs on integer luminance (`299 R + 587 G + 114 B`) so results are
//! exactly reproducible: a quantized Gaussian kernel is applied separably with
//! round-half-up division after each pass, Sobel gradients and squared
//! magnitudes stay integral, and only the direction binning and the relative
//! thresholds touch floating point. Borders replicate the edge pixel for the
//! blur and Sobel stages; non-maximum suppression treats out-of-bounds
//! neighbours as zero magnitude.

use std::collections::VecDeque;
use std::f64::consts::SQRT_2;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{PriorError, PriorImage};

/// Kernel weights are scaled to sum to roughly this before rounding.
const KERNEL_SCALE: f64 = 4096.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CannyParams {
    pub gaussian_sigma: f64,
    pub kernel_size: usize,
    /// Fraction of the maximum gradient magnitude.
    pub low_threshold: f64,
    /// Fraction of the maximum gradient magnitude.
    pub high_threshold: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self { gaussian_sigma: 1.4, kernel_size: 5, low_threshold: 0.1, high_threshold: 0.2 }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<(), PriorError> {
        let bad = |msg: &str| Err(PriorError::InvalidParams(msg.to_string()));
        if self.kernel_size < 3 || self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd and at least 3");
        }
        if !(self.gaussian_sigma.is_finite() && self.gaussian_sigma > 0.0) {
            return bad("gaussian_sigma must be positive");
        }
        let in_unit = |t: f64| t > 0.0 && t < 1.0;
        if !in_unit(self.low_threshold) || !in_unit(self.high_threshold) {
            return bad("thresholds must lie in (0, 1)");
        }
        if self.low_threshold >= self.high_threshold {
            return bad("low_threshold must be below high_threshold");
        }
        Ok(())
    }

    /// Integer Gaussian weights, symmetric, length `kernel_size`.
    pub fn kernel(&self) -> Vec<i64> {
        let r = (self.kernel_size / 2) as f64;
        let g: Vec<f64> = (0..self.kernel_size)
            .map(|i| {
                let d = i as f64 - r;
                (-(d * d) / (2.0 * self.gaussian_sigma * self.gaussian_sigma)).exp()
            })
            .collect();
        let total: f64 = g.iter().sum();
        g.iter().map(|v| (KERNEL_SCALE * v / total).round() as i64).collect()
    }
}

/// Direction bin of the gradient, named by the axis along which magnitudes are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Horizontal,
    Vertical,
    MainDiagonal,
    AntiDiagonal,
}

fn direction(gx: i64, gy: i64) -> Direction {
    let tan_22_5 = SQRT_2 - 1.0;
    let (ax, ay) = (gx.abs() as f64, gy.abs() as f64);
    if ay <= tan_22_5 * ax {
        Direction::Horizontal
    } else if ax <= tan_22_5 * ay {
        Direction::Vertical
    } else if (gx > 0) == (gy > 0) {
        Direction::MainDiagonal
    } else {
        Direction::AntiDiagonal
    }
}

struct Grid<T> {
    w: usize,
    h: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    fn clamped(&self, x: isize, y: isize) -> T {
        let cx = x.clamp(0, self.w as isize - 1) as usize;
        let cy = y.clamp(0, self.h as isize - 1) as usize;
        self.data[cy * self.w + cx]
    }
}

fn luminance(image: &RgbImage) -> Grid<i64> {
    let data = image.pixels().map(|p| 299 * p[0] as i64 + 587 * p[1] as i64 + 114 * p[2] as i64).collect();
    Grid { w: image.width() as usize, h: image.height() as usize, data }
}

fn round_div(numerator: i64, denominator: i64) -> i64 {
    (numerator + denominator / 2).div_euclid(denominator)
}

fn blur_pass(src: &Grid<i64>, kernel: &[i64], horizontal: bool) -> Grid<i64> {
    let sum: i64 = kernel.iter().sum();
    let r = (kernel.len() / 2) as isize;
    let mut data = Vec::with_capacity(src.data.len());
    for y in 0..src.h as isize {
        for x in 0..src.w as isize {
            let acc: i64 = kernel
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let o = i as isize - r;
                    let v = if horizontal { src.clamped(x + o, y) } else { src.clamped(x, y + o) };
                    k * v
                })
                .sum();
            data.push(round_div(acc, sum));
        }
    }
    Grid { w: src.w, h: src.h, data }
}

fn sobel(b: &Grid<i64>) -> (Grid<i64>, Grid<i64>) {
    let mut gx = Vec::with_capacity(b.data.len());
    let mut gy = Vec::with_capacity(b.data.len());
    for y in 0..b.h as isize {
        for x in 0..b.w as isize {
            let p = |dx: isize, dy: isize| b.clamped(x + dx, y + dy);
            gx.push((p(1, -1) + 2 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2 * p(-1, 0) + p(-1, 1)));
            gy.push((p(-1, 1) + 2 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2 * p(0, -1) + p(1, -1)));
        }
    }
    (Grid { w: b.w, h: b.h, data: gx }, Grid { w: b.w, h: b.h, data: gy })
}

/// Binary edge map of `image` (1.0 on edges).
pub fn canny_edges(image: &RgbImage, params: &CannyParams) -> Result<PriorImage, PriorError> {
    params.validate()?;
    let (width, height) = image.dimensions();
    if width == 0 || height == 0 {
        return Err(PriorError::EmptyImage);
    }
    if (width as usize) < params.kernel_size || (height as usize) < params.kernel_size {
        return Err(PriorError::ImageTooSmall { width, height, kernel: params.kernel_size });
    }

    let kernel = params.kernel();
    let blurred = blur_pass(&blur_pass(&luminance(image), &kernel, true), &kernel, false);
    let (gx, gy) = sobel(&blurred);
    let (w, h) = (blurred.w, blurred.h);
    let mag2: Vec<i64> = gx.data.iter().zip(&gy.data).map(|(a, b)| a * a + b * b).collect();
    let max2 = mag2.iter().copied().max().unwrap_or(0);
    let mut out = PriorImage::zeros(width, height);
    if max2 == 0 {
        return Ok(out);
    }

    let m2 = |x: isize, y: isize| -> i64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0
        } else {
            mag2[y as usize * w + x as usize]
        }
    };

    // Non-maximum suppression: strictly above the first neighbour, at least
    // the second, so plateaus two pixels wide keep exactly one pixel.
    let mut thin = vec![0i64; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag2[i];
            if m == 0 {
                continue;
            }
            let (xi, yi) = (x as isize, y as isize);
            let (first, second) = match direction(gx.data[i], gy.data[i]) {
                Direction::Horizontal => (m2(xi - 1, yi), m2(xi + 1, yi)),
                Direction::Vertical => (m2(xi, yi - 1), m2(xi, yi + 1)),
                Direction::MainDiagonal => (m2(xi - 1, yi - 1), m2(xi + 1, yi + 1)),
                Direction::AntiDiagonal => (m2(xi + 1, yi - 1), m2(xi - 1, yi + 1)),
            };
            if m > first && m >= second {
                thin[i] = m;
            }
        }
    }

    let max = (max2 as f64).sqrt();
    let high = params.high_threshold * max;
    let low = params.low_threshold * max;
    let magnitude = |m: i64| (m as f64).sqrt();

    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m > 0 && magnitude(m) >= high {
            out.values[i] = 1.0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out.values[j] == 0.0 && thin[j] > 0 && magnitude(thin[j]) >= low {
                    out.values[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(out)
}
