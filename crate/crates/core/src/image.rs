//! Binary PGM output and image montages.

use std::path::Path;

use crate::dataset::ImageTensor;
use crate::error::{Error, Result};

pub const SEPARATOR: f64 = 0.5;

/// Maps a [0, 1] intensity to a byte, rounding half up.
pub fn to_byte(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

pub fn encode_pgm(pixels: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if pixels.len() != height * width {
        return Err(Error::shape(height * width, pixels.len()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&p| to_byte(p)));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, pixels: &[f64], height: usize, width: usize) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(pixels, height, width)?).map_err(|e| Error::io(path, e))
}

/// Parses a binary P5 file with maxval 255 back to [0, 1] intensities.
pub fn decode_pgm(bytes: &[u8]) -> Result<(Vec<f64>, usize, usize)> {
    let bad = |m: &str| Error::Format(format!("PGM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("header"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != width * height {
        return Err(bad("pixel count mismatch"));
    }
    Ok((data.iter().map(|&b| b as f64 / 255.0).collect(), height, width))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(Vec<f64>, usize, usize)> {
    let path = path.as_ref();
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Tiles images row-major into a `rows`×`cols` grid with 1-px separators.
/// Returns the pixels and the montage height and width.
pub fn montage(images: &ImageTensor, rows: usize, cols: usize) -> Result<(Vec<f64>, usize, usize)> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidParameter("montage grid must be non-empty".into()));
    }
    if images.count > rows * cols {
        return Err(Error::InvalidParameter(format!(
            "{} images do not fit a {rows}x{cols} montage",
            images.count
        )));
    }
    let (h, w) = (images.height, images.width);
    let height = rows * (h + 1) + 1;
    let width = cols * (w + 1) + 1;
    let mut out = vec![SEPARATOR; height * width];
    for (i, img) in images.iter().enumerate() {
        let (r0, c0) = ((i / cols) * (h + 1) + 1, (i % cols) * (w + 1) + 1);
        for r in 0..h {
            let dst = (r0 + r) * width + c0;
            out[dst..dst + w].copy_from_slice(&img[r * w..(r + 1) * w]);
        }
    }
    Ok((out, height, width))
}

/// Parses `RxC`.
pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidParameter(format!("invalid grid {s:?}, expected RxC"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let r = r.trim().parse().map_err(|_| bad())?;
    let c = c.trim().parse().map_err(|_| bad())?;
    if r == 0 || c == 0 {
        return Err(bad());
    }
    Ok((r, c))
}
