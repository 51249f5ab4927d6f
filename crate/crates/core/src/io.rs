//! Image exchange formats.
//!
//! * `pgm8`: binary PGM (`P5`, maxval 255), grayscale only. Values are clamped
//!   to `[0, 1]` and quantized round-half-up, `q = floor(255 v + 0.5)`.
//! * `tensor_f32`: lossless container. Layout: magic `ESDN`, `u16` format
//!   version, `u32` height, width, channels, then `H*W*C` little-endian `f32`
//!   values in row-major interleaved order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{Image, Shape};

pub const TENSOR_MAGIC: &[u8; 4] = b"ESDN";
pub const TENSOR_VERSION: u16 = 1;
const TENSOR_HEADER_LEN: usize = 4 + 2 + 3 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    Pgm8,
    TensorF32,
}

impl ImageFormat {
    /// `.pgm` selects `pgm8`; anything else is read as `tensor_f32`.
    pub fn from_path(path: &Path) -> ImageFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("pgm") => ImageFormat::Pgm8,
            _ => ImageFormat::TensorF32,
        }
    }
}

pub fn quantize_u8(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (255.0 * v + 0.5).floor() as u8
}

pub fn write_image(image: &Image, path: &Path, format: ImageFormat) -> Result<()> {
    let bytes = match format {
        ImageFormat::Pgm8 => encode_pgm8(image)?,
        ImageFormat::TensorF32 => encode_tensor_f32(image),
    };
    fs::write(path, bytes).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_image(path: &Path, format: ImageFormat) -> Result<Image> {
    let bytes = fs::read(path).map_err(|source| Error::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    match format {
        ImageFormat::Pgm8 => decode_pgm8(&bytes).map_err(|e| match e {
            DecodeError::Malformed(r) => malformed(r),
            DecodeError::Overflow(r) => Error::DimensionOverflow(r),
        }),
        ImageFormat::TensorF32 => decode_tensor_f32(&bytes).map_err(|e| match e {
            DecodeError::Malformed(r) => malformed(r),
            DecodeError::Overflow(r) => Error::DimensionOverflow(r),
        }),
    }
}

/// Reads an image choosing the format from the file extension.
pub fn read_image_auto(path: &Path) -> Result<Image> {
    read_image(path, ImageFormat::from_path(path))
}

pub fn write_image_auto(image: &Image, path: &Path) -> Result<()> {
    write_image(image, path, ImageFormat::from_path(path))
}

/// Write followed by read.
pub fn roundtrip(image: &Image, path: &Path, format: ImageFormat) -> Result<Image> {
    write_image(image, path, format)?;
    read_image(path, format)
}

#[derive(Debug)]
pub(crate) enum DecodeError {
    Malformed(String),
    Overflow(String),
}

pub fn encode_pgm8(image: &Image) -> Result<Vec<u8>> {
    if image.channels() != 1 {
        return Err(invalid(format!(
            "pgm8 holds grayscale images only, got {} channels",
            image.channels()
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize_u8(v)));
    Ok(out)
}

pub(crate) fn decode_pgm8(bytes: &[u8]) -> Result<Image, DecodeError> {
    let mut pos = 0usize;
    let next_token = |pos: &mut usize| -> Result<String, DecodeError> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
            *pos += 1;
        }
        if start == *pos {
            return Err(DecodeError::Malformed("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = next_token(&mut pos)?;
    if magic != "P5" {
        return Err(DecodeError::Malformed(format!("expected P5 magic, got {magic:?}")));
    }
    let number = |pos: &mut usize, what: &str| -> Result<usize, DecodeError> {
        let tok = next_token(pos)?;
        tok.parse::<usize>().map_err(|_| {
            if !tok.is_empty() && tok.bytes().all(|b| b.is_ascii_digit()) {
                DecodeError::Overflow(format!("{what} {tok} does not fit"))
            } else {
                DecodeError::Malformed(format!("bad {what}: {tok:?}"))
            }
        })
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval = number(&mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(DecodeError::Malformed(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(DecodeError::Malformed("missing raster separator".into()));
    }
    pos += 1;
    let shape = checked_shape(height, width, 1)?;
    let raster = &bytes[pos..];
    if raster.len() < shape.len() {
        return Err(DecodeError::Malformed(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            shape.len()
        )));
    }
    let scale = maxval as f64;
    let data = raster[..shape.len()].iter().map(|&b| b as f64 / scale).collect();
    Image::from_vec(shape, data).map_err(|e| DecodeError::Malformed(e.to_string()))
}

pub fn encode_tensor_f32(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(TENSOR_HEADER_LEN + 4 * image.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    for dim in [image.height(), image.width(), image.channels()] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub(crate) fn decode_tensor_f32(bytes: &[u8]) -> Result<Image, DecodeError> {
    if bytes.len() < TENSOR_HEADER_LEN {
        return Err(DecodeError::Malformed("truncated tensor header".into()));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(DecodeError::Malformed("bad tensor magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TENSOR_VERSION {
        return Err(DecodeError::Malformed(format!("unsupported tensor version {version}")));
    }
    let dim = |i: usize| {
        let off = 6 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
    };
    let shape = checked_shape(dim(0), dim(1), dim(2))?;
    let body = &bytes[TENSOR_HEADER_LEN..];
    let expected = shape
        .len()
        .checked_mul(4)
        .ok_or_else(|| DecodeError::Overflow("tensor byte length".into()))?;
    if body.len() != expected {
        return Err(DecodeError::Malformed(format!(
            "tensor body has {} bytes, expected {expected}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Image::from_vec(shape, data).map_err(|e| DecodeError::Malformed(e.to_string()))
}

fn checked_shape(h: usize, w: usize, c: usize) -> Result<Shape, DecodeError> {
    Shape::new(h, w, c).map_err(|e| match e {
        Error::DimensionOverflow(r) => DecodeError::Overflow(r),
        other => DecodeError::Malformed(other.to_string()),
    })
}
