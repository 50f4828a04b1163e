//! Fixed image <-> latent mapping standing in for a learned autoencoder.
//!
//! A `[2h, 2w]` sRGB image maps to a `[h, w, 4]` latent: 2x2 means of the
//! rgb channels and of luma, each mapped from `[0, 1]` to `[-1, 1]`.
//! Decoding reads the rgb channels and repeats each latent pixel 2x2.

use cdst_tensor::Tensor;

use crate::colorlab::{luma, ColorSpace, ImageBuffer};
use crate::error::{CdstError, Result};

pub const LATENT_CHANNELS: usize = 4;

pub fn encode(img: &ImageBuffer) -> Result<Tensor> {
    if img.space() != ColorSpace::Srgb {
        return Err(CdstError::InvalidImage(format!("encode expects sRGB, got {:?}", img.space())));
    }
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 || w % 2 != 0 || h % 2 != 0 {
        return Err(CdstError::InvalidImage(format!("encode needs even sides, got {w}x{h}")));
    }
    let (lw, lh) = (w / 2, h / 2);
    let mut out = Vec::with_capacity(lw * lh * LATENT_CHANNELS);
    for y in 0..lh {
        for x in 0..lw {
            let mut acc = [0.0; LATENT_CHANNELS];
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let p = img.pixel(2 * x + dx, 2 * y + dy);
                acc[0] += p[0];
                acc[1] += p[1];
                acc[2] += p[2];
                acc[3] += luma(p);
            }
            out.extend(acc.iter().map(|a| a / 4.0 * 2.0 - 1.0));
        }
    }
    Ok(Tensor::new(&[lh, lw, LATENT_CHANNELS], out)?)
}

pub fn decode(latent: &Tensor) -> Result<ImageBuffer> {
    let s = latent.shape();
    if s.len() != 3 || s[2] != LATENT_CHANNELS || s[0] == 0 || s[1] == 0 {
        return Err(CdstError::Shape(format!("latent {s:?} must be [h, w, {LATENT_CHANNELS}]")));
    }
    let (lh, lw) = (s[0], s[1]);
    let d = latent.data();
    let mut out = Vec::with_capacity(lh * lw * 12);
    for y in 0..2 * lh {
        for x in 0..2 * lw {
            let base = ((y / 2) * lw + x / 2) * LATENT_CHANNELS;
            out.extend(d[base..base + 3].iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)));
        }
    }
    ImageBuffer::new(2 * lw, 2 * lh, ColorSpace::Srgb, out)
}

/// `decode(encode(img))`.
pub fn round_trip(img: &ImageBuffer) -> Result<ImageBuffer> {
    decode(&encode(img)?)
}
