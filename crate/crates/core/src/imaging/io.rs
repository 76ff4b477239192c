use std::io::{BufWriter, Write};
use std::path::Path;

use image::{DynamicImage, ImageFormat};

use super::Image;
use crate::error::{Error, Result};

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Loads a PNG (8/16-bit, gray or RGB; alpha dropped) or binary PGM (P5).
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(&bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else {
        Err(Error::UnsupportedFormat(path.display().to_string()))
    }
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    if bytes.len() >= 24 {
        let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
        let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
        if w == 0 || h == 0 {
            return Err(Error::ZeroDimension);
        }
    }
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Decode(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::ZeroDimension);
    }
    let (channels, data): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().iter().map(|&v| v as f32 / 255.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().iter().map(|&v| v as f32 / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => {
            (1, b.into_raw().iter().map(|&v| v as f32 / 65535.0).collect())
        }
        DynamicImage::ImageRgb16(b) => {
            (3, b.into_raw().iter().map(|&v| v as f32 / 65535.0).collect())
        }
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_) => {
            let b = img.to_luma16();
            (1, b.into_raw().iter().map(|&v| v as f32 / 65535.0).collect())
        }
        other => {
            let b = other.to_rgb16();
            (3, b.into_raw().iter().map(|&v| v as f32 / 65535.0).collect())
        }
    };
    Image::from_vec(w, h, channels, data)
}

fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Decode("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode("bad PGM header field".into()))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::ZeroDimension);
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Decode(format!("bad PGM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = w * h * bpp;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Decode(format!("PGM raster truncated: need {need} bytes")))?;
    let scale = maxval as f32;
    let data = if bpp == 1 {
        raster.iter().map(|&v| v as f32 / scale).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / scale)
            .collect()
    };
    Image::from_vec(w, h, 1, data)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG or PGM, chosen by file extension.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    match ext.as_str() {
        "png" => {
            let (w, h) = (img.width() as u32, img.height() as u32);
            let dynamic = if img.channels() == 1 {
                DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, bytes).unwrap())
            } else {
                DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).unwrap())
            };
            dynamic
                .save_with_format(path, ImageFormat::Png)
                .map_err(|e| Error::Decode(e.to_string()))
        }
        "pgm" => {
            let gray = img.to_gray();
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut out = BufWriter::new(file);
            let raster: Vec<u8> = gray.data().iter().map(|&v| to_u8(v)).collect();
            write!(out, "P5\n{} {}\n255\n", gray.width(), gray.height())
                .and_then(|_| out.write_all(&raster))
                .and_then(|_| out.flush())
                .map_err(|e| Error::io(path, e))
        }
        _ => Err(Error::UnsupportedFormat(path.display().to_string())),
    }
}
