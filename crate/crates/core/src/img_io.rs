//! Binary PPM (P6) and PGM (P5) image files, plus tensor conversions.
//!
//! These two formats are written byte-for-byte deterministically: header
//! `P6\n{w} {h}\n255\n` (or `P5`) followed by the raw samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Usage(format!(
            "ppm buffer length {} != {}x{}x3",
            rgb.len(),
            width,
            height
        )));
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::Usage(format!(
            "pgm buffer length {} != {}x{}",
            gray.len(),
            width,
            height
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(gray);
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_header<'a>(data: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    // Returns (width, height, offset of first sample byte).
    let err = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if data.len() < 2 || &data[..2] != magic.as_bytes() {
        return Err(err(&format!("missing {magic} magic")));
    }
    let mut fields = Vec::new();
    let mut i = 2usize;
    while fields.len() < 3 {
        // Skip whitespace and comment lines.
        while i < data.len() && (data[i].is_ascii_whitespace()) {
            i += 1;
        }
        if i < data.len() && data[i] == b'#' {
            while i < data.len() && data[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < data.len() && data[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            return Err(err("malformed header"));
        }
        let text = std::str::from_utf8(&data[start..i]).map_err(|_| err("non-utf8 header"))?;
        fields.push(
            text.parse::<usize>()
                .map_err(|_| err("bad header number"))?,
        );
    }
    if fields[2] != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the samples.
    if i >= data.len() || !data[i].is_ascii_whitespace() {
        return Err(err("missing sample separator"));
    }
    Ok((fields[0], fields[1], i + 1))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (w, h, off) = parse_header(&data, "P6", path)?;
    let need = w * h * 3;
    if data.len() < off + need {
        return Err(Error::Data(format!(
            "{}: truncated pixel data",
            path.display()
        )));
    }
    Ok((w, h, data[off..off + need].to_vec()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (w, h, off) = parse_header(&data, "P5", path)?;
    let need = w * h;
    if data.len() < off + need {
        return Err(Error::Data(format!(
            "{}: truncated pixel data",
            path.display()
        )));
    }
    Ok((w, h, data[off..off + need].to_vec()))
}

/// Interleaved RGB bytes to a [3, H, W] tensor scaled to [0, 1].
pub fn rgb_to_tensor<T: Scalar>(rgb: &[u8], width: usize, height: usize) -> Tensor<T> {
    let plane = width * height;
    let mut data = vec![T::zero(); 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = T::from_f64(rgb[p * 3 + c] as f64 / 255.0);
        }
    }
    Tensor::new(vec![3, height, width], data).expect("rgb tensor shape")
}

/// Gray bytes to a binary [H, W] tensor (>= 128 is foreground).
pub fn gray_to_mask_tensor<T: Scalar>(gray: &[u8], width: usize, height: usize) -> Tensor<T> {
    let data = gray
        .iter()
        .map(|&g| if g >= 128 { T::one() } else { T::zero() })
        .collect();
    Tensor::new(vec![height, width], data).expect("mask tensor shape")
}

/// Probability map [H, W] to gray bytes, value = round(255 * p).
pub fn prob_to_gray<T: Scalar>(p: &Tensor<T>) -> Vec<u8> {
    p.data()
        .iter()
        .map(|&v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Binary mask tensor [H, W] to 0/255 gray bytes.
pub fn mask_to_gray<T: Scalar>(m: &Tensor<T>) -> Vec<u8> {
    m.data()
        .iter()
        .map(|&v| if v.as_f64() >= 0.5 { 255 } else { 0 })
        .collect()
}
