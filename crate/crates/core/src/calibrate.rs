//! Global color calibration: per-channel YUV mean/std matching of a
//! generated image to a color reference, blended by `alpha`.

use crate::colorlab::{convert, ColorSpace, ImageBuffer};
use crate::error::{CdstError, Result};

/// Channels with a standard deviation below this are shifted, not scaled.
pub const MIN_STD: f64 = 1e-8;

pub const DEFAULT_ALPHA: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Population mean and standard deviation of each channel of a YUV image.
pub fn channel_stats(img: &ImageBuffer) -> Result<ChannelStats> {
    if img.space() != ColorSpace::Yuv {
        return Err(CdstError::InvalidImage(format!("channel_stats needs YUV, got {:?}", img.space())));
    }
    if img.is_empty() {
        return Err(CdstError::EmptyImage);
    }
    let n = img.pixel_count() as f64;
    let mut mean = [0.0; 3];
    for p in img.pixels() {
        for c in 0..3 {
            mean[c] += p[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 3];
    for p in img.pixels() {
        for c in 0..3 {
            var[c] += (p[c] - mean[c]) * (p[c] - mean[c]);
        }
    }
    Ok(ChannelStats {
        mean,
        std: var.map(|v| (v / n).sqrt()),
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CdstError::InvalidParameter(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// The blended calibration target `alpha * I' + (1 - alpha) * I` in YUV,
/// before any conversion back to sRGB.
pub fn calibrate_yuv(image: &ImageBuffer, reference: &ImageBuffer, alpha: f64) -> Result<ImageBuffer> {
    check_alpha(alpha)?;
    let img = convert(image, ColorSpace::Yuv)?;
    let refr = convert(reference, ColorSpace::Yuv)?;
    let si = channel_stats(&img)?;
    let sr = channel_stats(&refr)?;
    let ratio: [f64; 3] = std::array::from_fn(|c| if si.std[c] < MIN_STD { 1.0 } else { sr.std[c] / si.std[c] });
    let data = img
        .pixels()
        .flat_map(|p| {
            std::array::from_fn::<f64, 3, _>(|c| {
                let matched = (p[c] - si.mean[c]) * ratio[c] + sr.mean[c];
                alpha * matched + (1.0 - alpha) * p[c]
            })
        })
        .collect();
    ImageBuffer::new(img.width(), img.height(), ColorSpace::Yuv, data)
}

/// Calibrates sRGB `image` against sRGB `reference`; result is clamped to `[0, 1]`.
///
/// The YUV correction is applied as an additive sRGB delta, so `alpha = 0`
/// returns the input bit for bit.
pub fn global_color_calibration(image: &ImageBuffer, reference: &ImageBuffer, alpha: f64) -> Result<ImageBuffer> {
    if image.space() != ColorSpace::Srgb || reference.space() != ColorSpace::Srgb {
        return Err(CdstError::InvalidImage("calibration needs sRGB inputs".into()));
    }
    let target = calibrate_yuv(image, reference, alpha)?;
    let src = convert(image, ColorSpace::Yuv)?;
    let data = image
        .pixels()
        .zip(target.pixels().zip(src.pixels()))
        .flat_map(|(rgb, (t, s))| {
            let delta = yuv_delta_to_rgb([t[0] - s[0], t[1] - s[1], t[2] - s[2]]);
            [0, 1, 2].map(|c| (rgb[c] + delta[c]).clamp(0.0, 1.0))
        })
        .collect();
    ImageBuffer::new(image.width(), image.height(), ColorSpace::Srgb, data)
}

/// Linear part of YUV -> RGB; zero maps to exactly zero.
fn yuv_delta_to_rgb(d: [f64; 3]) -> [f64; 3] {
    let r = d[0] + 1.402 * d[2];
    let b = d[0] + 1.772 * d[1];
    let g = (d[0] - 0.299 * r - 0.114 * b) / 0.587;
    [r, g, b]
}
