//! Color spaces, greyscale, the 180-entry palette histogram and the
//! histogram color distance.

use serde::{Deserialize, Serialize};

use crate::error::{CdstError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColorSpace {
    Srgb,
    LinearRgb,
    /// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
    Hsv,
    /// CIE L*a*b* under D65.
    Lab,
    /// BT.601 full range, zero-centred chroma.
    Yuv,
    Grey,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Grey => 1,
            _ => 3,
        }
    }
}

/// Row-major, channel-interleaved raster.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    space: ColorSpace,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, space: ColorSpace, data: Vec<f64>) -> Result<Self> {
        let expected = width * height * space.channels();
        if data.len() != expected {
            return Err(CdstError::InvalidImage(format!(
                "{width}x{height} {space:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CdstError::InvalidImage("non-finite channel value".into()));
        }
        if space == ColorSpace::Srgb && data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CdstError::InvalidImage("sRGB values must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            space,
            data,
        })
    }

    /// sRGB image filled with one color.
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, ColorSpace::Srgb, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn channels(&self) -> usize {
        self.space.channels()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_count() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let c = self.channels();
        &self.data[(y * self.width + x) * c..][..c]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.channels())
    }

    fn require(&self, space: ColorSpace) -> Result<()> {
        if self.space != space {
            return Err(CdstError::InvalidImage(format!("expected {space:?} image, got {:?}", self.space)));
        }
        Ok(())
    }

    fn map_pixels(&self, space: ColorSpace, f: impl Fn(&[f64]) -> [f64; 3]) -> ImageBuffer {
        let data = self.pixels().flat_map(f).collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            space,
            data,
        }
    }
}

/// BT.601 luma written so that `(g, g, g)` maps to exactly `g`.
pub fn luma(rgb: &[f64]) -> f64 {
    let (r, g, b) = (rgb[0], rgb[1], rgb[2]);
    g + 0.299 * (r - g) + 0.114 * (b - g)
}

pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

// D65 reference white: XYZ of sRGB (1, 1, 1) under the matrix above.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

pub fn srgb_to_lab(rgb: &[f64]) -> [f64; 3] {
    let lin = [srgb_to_linear(rgb[0]), srgb_to_linear(rgb[1]), srgb_to_linear(rgb[2])];
    let mut f = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        let xyz = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        f[i] = lab_f(xyz / WHITE[i]);
    }
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

pub fn srgb_to_hsv(rgb: &[f64]) -> [f64; 3] {
    let (r, g, b) = (rgb[0], rgb[1], rgb[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return [0.0, s, max];
    }
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    [(60.0 * sector).rem_euclid(360.0), s, max]
}

pub fn hsv_to_srgb(hsv: &[f64]) -> [f64; 3] {
    let (h, s, v) = (hsv[0].rem_euclid(360.0), hsv[1], hsv[2]);
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn srgb_to_yuv(rgb: &[f64]) -> [f64; 3] {
    let y = luma(rgb);
    [y, (rgb[2] - y) / 1.772, (rgb[0] - y) / 1.402]
}

pub fn yuv_to_srgb(yuv: &[f64]) -> [f64; 3] {
    let (y, u, v) = (yuv[0], yuv[1], yuv[2]);
    let r = y + 1.402 * v;
    let b = y + 1.772 * u;
    let g = (y - 0.299 * r - 0.114 * b) / 0.587;
    [r, g, b]
}

/// Pixel-wise color space conversion.
pub fn convert(img: &ImageBuffer, target: ColorSpace) -> Result<ImageBuffer> {
    use ColorSpace::*;
    let from = img.space;
    if from == target {
        return Ok(img.clone());
    }
    let out = match (from, target) {
        (Srgb, Hsv) => img.map_pixels(Hsv, srgb_to_hsv),
        (Hsv, Srgb) => img.map_pixels(Srgb, |p| hsv_to_srgb(p).map(|c| c.clamp(0.0, 1.0))),
        (Srgb, LinearRgb) => img.map_pixels(LinearRgb, |p| [0, 1, 2].map(|i| srgb_to_linear(p[i]))),
        (LinearRgb, Srgb) => img.map_pixels(Srgb, |p| [0, 1, 2].map(|i| linear_to_srgb(p[i]).clamp(0.0, 1.0))),
        (Srgb, Lab) => img.map_pixels(Lab, srgb_to_lab),
        (Srgb, Yuv) => img.map_pixels(Yuv, srgb_to_yuv),
        (Yuv, Srgb) => img.map_pixels(Srgb, |p| yuv_to_srgb(p).map(|c| c.clamp(0.0, 1.0))),
        (Srgb, Grey) => return greyscale(img),
        (Grey, Srgb) => ImageBuffer {
            width: img.width,
            height: img.height,
            space: Srgb,
            data: img.data.iter().flat_map(|&g| [g, g, g]).collect(),
        },
        _ => return Err(CdstError::ConversionUnsupported { from, to: target }),
    };
    Ok(out)
}

/// Single-channel BT.601 luma of an sRGB image.
pub fn greyscale(img: &ImageBuffer) -> Result<ImageBuffer> {
    img.require(ColorSpace::Srgb)?;
    Ok(ImageBuffer {
        width: img.width,
        height: img.height,
        space: ColorSpace::Grey,
        data: img.pixels().map(luma).collect(),
    })
}

/// Rotates chroma by `degrees` around the grey axis while keeping every
/// pixel's computed luma bit-identical to the input's.
///
/// Pixels whose rotated color cannot be brought into gamut with identical
/// luma keep their original value.
pub fn recolor_preserving_luma(img: &ImageBuffer, degrees: f64) -> Result<ImageBuffer> {
    img.require(ColorSpace::Srgb)?;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let data = img
        .pixels()
        .flat_map(|p| {
            let [y, u, v] = srgb_to_yuv(p);
            let (ru, rv) = (cos * u - sin * v, sin * u + cos * v);
            let mut shrink = 1.0;
            for _ in 0..20 {
                let cand = yuv_to_srgb(&[y, ru * shrink, rv * shrink]);
                if cand.iter().all(|c| (0.0..=1.0).contains(c)) {
                    if let Some(fixed) = match_luma(cand, luma(p)) {
                        return fixed;
                    }
                }
                shrink *= 0.8;
            }
            [p[0], p[1], p[2]]
        })
        .collect();
    ImageBuffer::new(img.width, img.height, ColorSpace::Srgb, data)
}

/// Nudges the green channel by single ulps until `luma` reproduces `target` exactly.
fn match_luma(mut rgb: [f64; 3], target: f64) -> Option<[f64; 3]> {
    for _ in 0..256 {
        let y = luma(&rgb);
        if y == target {
            return Some(rgb);
        }
        let g = rgb[1];
        rgb[1] = if y < target { g.next_up() } else { g.next_down() };
        if !(0.0..=1.0).contains(&rgb[1]) {
            return None;
        }
    }
    None
}

pub const PALETTE_BINS: usize = 180;
pub const DEFAULT_PALETTE: &str = "hsv12x15-v1";

/// Fixed quantization palette.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    version: String,
    lab: Vec<[f64; 3]>,
    srgb: Vec<[f64; 3]>,
}

impl Palette {
    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn entries(&self) -> &[[f64; 3]] {
        &self.lab
    }

    /// The sRGB color each LAB entry was derived from.
    pub fn srgb(&self) -> &[[f64; 3]] {
        &self.srgb
    }

    pub fn len(&self) -> usize {
        self.lab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lab.is_empty()
    }

    /// Index of the nearest entry by Euclidean LAB distance, lowest index on ties.
    pub fn nearest(&self, lab: &[f64; 3]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, e) in self.lab.iter().enumerate() {
            let d = (e[0] - lab[0]).powi(2) + (e[1] - lab[1]).powi(2) + (e[2] - lab[2]).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

pub const PALETTE_HUES: usize = 12;
pub const PALETTE_SATURATIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const PALETTE_VALUES: [f64; 3] = [1.0 / 3.0, 2.0 / 3.0, 1.0];

/// Builds the palette for `version`. Entry `hue * 15 + sat * 3 + val`
/// is the HSV grid point (30°·hue, S[sat], V[val]) mapped through sRGB to LAB.
pub fn build_palette(version: &str) -> Result<Palette> {
    if version != DEFAULT_PALETTE {
        return Err(CdstError::UnknownPalette(version.to_string()));
    }
    let mut srgb = Vec::with_capacity(PALETTE_BINS);
    for h in 0..PALETTE_HUES {
        let hue = 360.0 * h as f64 / PALETTE_HUES as f64;
        for &s in &PALETTE_SATURATIONS {
            for &v in &PALETTE_VALUES {
                srgb.push(hsv_to_srgb(&[hue, s, v]));
            }
        }
    }
    let lab = srgb.iter().map(|c| srgb_to_lab(c)).collect();
    Ok(Palette {
        version: version.to_string(),
        lab,
        srgb,
    })
}

/// Normalized palette histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorHistogram {
    pub palette_version: String,
    pub bins: Vec<f64>,
}

impl ColorHistogram {
    pub fn new(palette_version: &str, bins: Vec<f64>) -> Result<Self> {
        let h = Self {
            palette_version: palette_version.to_string(),
            bins,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn one_hot(palette_version: &str, index: usize) -> Result<Self> {
        if index >= PALETTE_BINS {
            return Err(CdstError::InvalidHistogram(format!("bin {index} out of range")));
        }
        let mut bins = vec![0.0; PALETTE_BINS];
        bins[index] = 1.0;
        Self::new(palette_version, bins)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins.len() != PALETTE_BINS {
            return Err(CdstError::InvalidHistogram(format!(
                "expected {PALETTE_BINS} bins, got {}",
                self.bins.len()
            )));
        }
        if self.bins.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(CdstError::InvalidHistogram("bins must be finite and non-negative".into()));
        }
        let sum: f64 = self.bins.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CdstError::InvalidHistogram(format!("bins sum to {sum}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let h: Self = serde_json::from_str(s)?;
        h.validate()?;
        Ok(h)
    }
}

/// Hard nearest-entry histogram of an sRGB image, normalized by pixel count.
pub fn extract_histogram(img: &ImageBuffer, palette: &Palette) -> Result<ColorHistogram> {
    img.require(ColorSpace::Srgb)?;
    if img.is_empty() {
        return Err(CdstError::EmptyImage);
    }
    let mut counts = vec![0usize; palette.len()];
    for p in img.pixels() {
        counts[palette.nearest(&srgb_to_lab(p))] += 1;
    }
    let n = img.pixel_count() as f64;
    Ok(ColorHistogram {
        palette_version: palette.version.clone(),
        bins: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// Euclidean distance between histogram bin vectors.
pub fn color_distance(a: &ColorHistogram, b: &ColorHistogram) -> Result<f64> {
    if a.palette_version != b.palette_version {
        return Err(CdstError::PaletteMismatch(a.palette_version.clone(), b.palette_version.clone()));
    }
    if a.bins.len() != b.bins.len() {
        return Err(CdstError::InvalidHistogram("bin counts differ".into()));
    }
    Ok(a.bins
        .iter()
        .zip(&b.bins)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}
