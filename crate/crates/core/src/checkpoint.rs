//! Denoiser checkpoints: a length-prefixed JSON header followed by the
//! parameter vector in the `tensor_f32` container.
//!
//! Layout: `u32` little-endian header length, header JSON bytes, then the
//! container holding theta as a `1 x P x 1` tensor (omitted when `P = 0`).
//! Parameters are stored as f32, so a reloaded model matches the saved one to
//! single precision.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{Architecture, Denoiser};
use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::io::{decode_tensor_f32, encode_tensor_f32, DecodeError};

pub const CHECKPOINT_FORMAT: &str = "esure-checkpoint/1";

/// First 16 hex digits of the SHA-256 of a JSON value's compact encoding.
pub fn digest_json(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("json value serializes");
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub architecture: Architecture,
    pub param_count: usize,
    #[serde(default)]
    pub config_digest: Option<String>,
}

pub fn encode_checkpoint(d: &Denoiser, config_digest: Option<&str>) -> Vec<u8> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        architecture: d.architecture().clone(),
        param_count: d.param_count(),
        config_digest: config_digest.map(str::to_string),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(4 + json.len() + 18 + 4 * d.param_count());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    if d.param_count() > 0 {
        let theta = Image::from_vec(
            Shape::new(1, d.param_count(), 1).expect("positive length"),
            d.params().to_vec(),
        )
        .expect("length matches shape");
        out.extend_from_slice(&encode_tensor_f32(&theta));
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Denoiser, CheckpointHeader)> {
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 {
        return Err(malformed("truncated checkpoint".into()));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let body = &bytes[4..];
    if body.len() < len {
        return Err(malformed("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])
        .map_err(|e| malformed(format!("bad checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(malformed(format!("unsupported format {:?}", header.format)));
    }
    if header.param_count != header.architecture.param_count() {
        return Err(malformed("parameter count disagrees with architecture".into()));
    }
    let rest = &body[len..];
    let params = if header.param_count == 0 {
        if !rest.is_empty() {
            return Err(malformed("trailing bytes after header".into()));
        }
        Vec::new()
    } else {
        let theta = decode_tensor_f32(rest).map_err(|e| match e {
            DecodeError::Malformed(r) => malformed(r),
            DecodeError::Overflow(r) => Error::DimensionOverflow(r),
        })?;
        if theta.shape().as_tuple() != (1, header.param_count, 1) {
            return Err(malformed("parameter tensor has the wrong shape".into()));
        }
        theta.into_vec()
    };
    Ok((Denoiser::new(header.architecture.clone(), params)?, header))
}

pub fn save_checkpoint(d: &Denoiser, config_digest: Option<&str>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(d, config_digest)).map_err(|source| {
        Error::Unwritable {
            path: path.to_path_buf(),
            source,
        }
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(Denoiser, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|source| Error::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, path)
}
