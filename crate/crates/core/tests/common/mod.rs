#![allow(dead_code)]

use cdst_core::colorlab::{ColorSpace, ImageBuffer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
    let mut r = rng(seed);
    let data = (0..w * h * 3).map(|_| r.random::<f64>()).collect();
    ImageBuffer::new(w, h, ColorSpace::Srgb, data).unwrap()
}

/// Straight transcription of the CIE sRGB -> XYZ(D65) -> L*a*b* formulas,
/// independent of the library's conversion code.
pub fn oracle_lab(rgb: [f64; 3]) -> [f64; 3] {
    let m = [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ];
    let white: Vec<f64> = m.iter().map(|r| r[0] + r[1] + r[2]).collect();
    let lin: Vec<f64> = rgb
        .iter()
        .map(|&c| if c <= 0.04045 { c / 12.92 } else { ((c + 0.055) / 1.055).powf(2.4) })
        .collect();
    let f = |t: f64| {
        let e = (6.0f64 / 29.0).powi(3);
        if t > e {
            t.cbrt()
        } else {
            t * 841.0 / 108.0 + 4.0 / 29.0
        }
    };
    let xyz: Vec<f64> = (0..3)
        .map(|i| f((m[i][0] * lin[0] + m[i][1] * lin[1] + m[i][2] * lin[2]) / white[i]))
        .collect();
    [116.0 * xyz[1] - 16.0, 500.0 * (xyz[0] - xyz[1]), 200.0 * (xyz[1] - xyz[2])]
}

/// Exhaustive histogram: every pixel against all palette entries.
pub fn oracle_histogram(img: &ImageBuffer, palette_lab: &[[f64; 3]]) -> Vec<f64> {
    let mut counts = vec![0usize; palette_lab.len()];
    for p in img.pixels() {
        let lab = oracle_lab([p[0], p[1], p[2]]);
        let dists: Vec<f64> = palette_lab
            .iter()
            .map(|e| ((e[0] - lab[0]).powi(2) + (e[1] - lab[1]).powi(2) + (e[2] - lab[2]).powi(2)).sqrt())
            .collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let idx = dists.iter().position(|&d| d == min).unwrap();
        counts[idx] += 1;
    }
    let n = img.pixel_count() as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Naive two-pass population mean/std per channel.
pub fn oracle_stats(values: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let n = values.len() as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = values.iter().map(|v| v[c]).sum::<f64>() / n;
        std[c] = (values.iter().map(|v| (v[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt();
    }
    (mean, std)
}

pub fn rot90(img: &ImageBuffer) -> ImageBuffer {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut data = Vec::with_capacity(w * h * c);
    // new image is h wide, w tall; new(x', y') = old(w - 1 - y', x')
    for y in 0..w {
        for x in 0..h {
            data.extend_from_slice(img.pixel(w - 1 - y, x));
        }
    }
    ImageBuffer::new(h, w, img.space(), data).unwrap()
}
