//! Canny edge maps for structure conditioning.
//!
//! All filtering runs in exact integer arithmetic on a 16-bit quantized
//! copy of the input, so results do not depend on summation order and the
//! detector commutes exactly with 90° rotations and flips.

use std::collections::VecDeque;

use crate::colorlab::{greyscale, ColorSpace, ImageBuffer};
use crate::error::{CdstError, Result};

pub const DEFAULT_LOW: f64 = 0.1;
pub const DEFAULT_HIGH: f64 = 0.2;
pub const DEFAULT_SIGMA: f64 = 1.0;

const INPUT_SCALE: f64 = 65535.0;
const KERNEL_SCALE: f64 = 4096.0;
const MAX_SIGMA: f64 = 32.0;

/// Binary edge raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl EdgeMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height || data.iter().any(|&v| v > 1) {
            return Err(CdstError::InvalidImage("edge map needs width*height values in {0, 1}".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// The map as a `{0.0, 1.0}` greyscale image.
    pub fn to_image(&self) -> ImageBuffer {
        let data = self.data.iter().map(|&v| v as f64).collect();
        ImageBuffer::new(self.width, self.height, ColorSpace::Grey, data).expect("dimensions match")
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<i128> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    (-r..=r)
        .map(|i| (KERNEL_SCALE * (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).round() as i128)
        .collect()
}

struct Grid {
    w: usize,
    h: usize,
    v: Vec<i128>,
}

impl Grid {
    fn at(&self, x: isize, y: isize) -> i128 {
        let xc = x.clamp(0, self.w as isize - 1) as usize;
        let yc = y.clamp(0, self.h as isize - 1) as usize;
        self.v[yc * self.w + xc]
    }
}

fn blur(g: &Grid, k: &[i128]) -> Grid {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0i128; g.v.len()];
    for y in 0..g.h {
        for x in 0..g.w {
            tmp[y * g.w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kw)| kw * g.at(x as isize + i as isize - r, y as isize))
                .sum();
        }
    }
    let t = Grid { w: g.w, h: g.h, v: tmp };
    let mut out = vec![0i128; g.v.len()];
    for y in 0..g.h {
        for x in 0..g.w {
            out[y * g.w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kw)| kw * t.at(x as isize, y as isize + i as isize - r))
                .sum();
        }
    }
    Grid { w: g.w, h: g.h, v: out }
}

/// Canny detector: Gaussian blur, Sobel gradients, non-maximum
/// suppression, then 8-connected double-threshold hysteresis.
///
/// Thresholds apply to gradient magnitudes normalized so that an unblurred
/// unit step has magnitude 1. Accepts sRGB (converted to luma) or grey input.
pub fn canny(img: &ImageBuffer, low: f64, high: f64, blur_sigma: f64) -> Result<EdgeMap> {
    if !(low > 0.0 && low < high) {
        return Err(CdstError::InvalidParameter(format!("need 0 < low < high, got low={low} high={high}")));
    }
    if !(blur_sigma > 0.0 && blur_sigma <= MAX_SIGMA) {
        return Err(CdstError::InvalidParameter(format!("blur_sigma {blur_sigma} outside (0, {MAX_SIGMA}]")));
    }
    let grey = match img.space() {
        ColorSpace::Grey => img.clone(),
        ColorSpace::Srgb => greyscale(img)?,
        other => return Err(CdstError::InvalidImage(format!("canny needs sRGB or grey input, got {other:?}"))),
    };
    let (w, h) = (grey.width(), grey.height());
    if w == 0 || h == 0 {
        return EdgeMap::new(w, h, vec![]);
    }
    let input = Grid {
        w,
        h,
        v: grey.data().iter().map(|&v| (v * INPUT_SCALE).round() as i128).collect(),
    };
    let kernel = gaussian_kernel(blur_sigma);
    let ksum: i128 = kernel.iter().sum();
    let b = blur(&input, &kernel);

    let mut gx = vec![0i128; w * h];
    let mut gy = vec![0i128; w * h];
    let mut mag = vec![0i128; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| b.at(x + dx, y + dy);
            let sx = p(1, -1) + 2 * p(1, 0) + p(1, 1) - p(-1, -1) - 2 * p(-1, 0) - p(-1, 1);
            let sy = p(-1, 1) + 2 * p(0, 1) + p(1, 1) - p(-1, -1) - 2 * p(0, -1) - p(1, -1);
            let i = y as usize * w + x as usize;
            gx[i] = sx;
            gy[i] = sy;
            mag[i] = sx * sx + sy * sy;
        }
    }
    let mags = Grid { w, h, v: mag };

    // Squared-magnitude thresholds in grid units.
    let unit = 4.0 * INPUT_SCALE * (ksum * ksum) as f64;
    let (low_sq, high_sq) = ((low * unit).powi(2), (high * unit).powi(2));

    let mut weak = vec![false; w * h];
    let mut strong = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mags.v[i];
            if m == 0 {
                continue;
            }
            let (ax, ay) = (gx[i].abs(), gy[i].abs());
            // 12/29 ~ tan(22.5°)
            let (dx, dy): (isize, isize) = if 29 * ay <= 12 * ax {
                (1, 0)
            } else if 29 * ax <= 12 * ay {
                (0, 1)
            } else if (gx[i] > 0) == (gy[i] > 0) {
                (1, 1)
            } else {
                (1, -1)
            };
            let (xi, yi) = (x as isize, y as isize);
            if m < mags.at(xi + dx, yi + dy) || m < mags.at(xi - dx, yi - dy) {
                continue;
            }
            let mf = m as f64;
            if mf >= low_sq {
                weak[i] = true;
                if mf >= high_sq {
                    strong.push(i);
                }
            }
        }
    }

    let mut out = vec![0u8; w * h];
    let mut queue: VecDeque<usize> = strong.into_iter().collect();
    for &i in &queue {
        out[i] = 1;
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if weak[j] && out[j] == 0 {
                    out[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }
    EdgeMap::new(w, h, out)
}
