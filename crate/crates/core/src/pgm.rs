//! Binary PGM (P5) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{FloatMap, Grid};

fn malformed(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "PGM",
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn encode_pgm(img: &Grid<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn decode_pgm(bytes: &[u8], origin: &Path) -> Result<Grid<u8>> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(malformed(origin, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(origin, "truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(origin, "header value out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(malformed(origin, "zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(malformed(origin, format!("unsupported maxval {maxval}")));
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed(origin, "no whitespace after maxval")),
    }
    let payload = &bytes[pos..];
    let need = width * height;
    if payload.len() < need {
        return Err(malformed(origin, format!("expected {need} pixels, found {}", payload.len())));
    }
    if payload.len() > need {
        return Err(malformed(origin, "trailing bytes after pixel data"));
    }
    Grid::new(height, width, payload.to_vec())
}

pub fn write_pgm(path: &Path, img: &Grid<u8>) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Grid<u8>> {
    let bytes = fs::read(path)?;
    decode_pgm(&bytes, path)
}

/// Maps `[-1, 1]` onto `0..=255`, clamping out-of-range values.
pub fn quantize_signed(img: &FloatMap) -> Grid<u8> {
    img.map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
}

/// Maps `[lo, hi]` onto `0..=255`.
pub fn quantize_range(img: &FloatMap, lo: f64, hi: f64) -> Grid<u8> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    img.map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn gray_to_signed(img: &Grid<u8>) -> FloatMap {
    img.map(|g| g as f64 / 127.5 - 1.0)
}
