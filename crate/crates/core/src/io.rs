//! PNG and JSON file helpers.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::colorlab::{ColorHistogram, ColorSpace, ImageBuffer};
use crate::edges::EdgeMap;
use crate::error::{CdstError, Result};

fn png_err(e: impl std::fmt::Display) -> CdstError {
    CdstError::Png(e.to_string())
}

/// Reads any 8/16-bit PNG as an sRGB image with values in `[0, 1]`.
/// Alpha is dropped.
pub fn read_png(path: &Path) -> Result<ImageBuffer> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err("image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let to_f = |b: u8| b as f64 / 255.0;
    let data: Vec<f64> = match info.color_type {
        ColorType::Rgb => bytes.iter().map(|&b| to_f(b)).collect(),
        ColorType::Rgba => bytes.chunks(4).flat_map(|p| [to_f(p[0]), to_f(p[1]), to_f(p[2])]).collect(),
        ColorType::Grayscale => bytes.iter().flat_map(|&b| [to_f(b); 3]).collect(),
        ColorType::GrayscaleAlpha => bytes.chunks(2).flat_map(|p| [to_f(p[0]); 3]).collect(),
        ColorType::Indexed => return Err(png_err("indexed color was not expanded")),
    };
    ImageBuffer::new(w, h, ColorSpace::Srgb, data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_raw(path: &Path, w: usize, h: usize, color: ColorType, depth: BitDepth, data: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// Writes an sRGB image as 8-bit RGB or a greyscale image as 8-bit grey.
pub fn write_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    let color = match img.space() {
        ColorSpace::Srgb => ColorType::Rgb,
        ColorSpace::Grey => ColorType::Grayscale,
        other => {
            return Err(CdstError::InvalidImage(format!("cannot write {other:?} image as PNG")));
        }
    };
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    write_raw(path, img.width(), img.height(), color, BitDepth::Eight, &bytes)
}

/// Writes an edge map as a 1-bit greyscale PNG (edge = white).
pub fn write_edge_png(path: &Path, edges: &EdgeMap) -> Result<()> {
    let row_bytes = edges.width().div_ceil(8);
    let mut packed = vec![0u8; row_bytes * edges.height()];
    for y in 0..edges.height() {
        for x in 0..edges.width() {
            if edges.get(x, y) {
                packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    write_raw(path, edges.width(), edges.height(), ColorType::Grayscale, BitDepth::One, &packed)
}

pub fn write_histogram(path: &Path, hist: &ColorHistogram) -> Result<()> {
    fs::write(path, hist.to_json()?)?;
    Ok(())
}

pub fn read_histogram(path: &Path) -> Result<ColorHistogram> {
    ColorHistogram::from_json(&fs::read_to_string(path)?)
}
