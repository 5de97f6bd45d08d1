//! `VSSA` model checkpoints.
//!
//! ```text
//! "VSSA" | version u32 = 1 | dim u64 | latent_dim u64 | k u64
//! | dead mask, ceil(latent_dim / 8) bytes, bit j = byte j/8, bit j%8
//! | f32 tensors: W_enc (latent_dim x dim) | W_dec (dim x latent_dim)
//! |              b_pre (dim) | b_enc (latent_dim)
//! | trailer length u64 | trailer JSON
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{SaeModel, Selection};
use crate::bundle::ByteReader;
use crate::error::{Error, Result};

pub const VSSA_MAGIC: &[u8; 4] = b"VSSA";
pub const VSSA_VERSION: u32 = 1;

/// JSON trailer stored after the tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointInfo {
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub selection: Selection,
    /// Training configuration echo, if the model came out of training.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

pub fn checkpoint_bytes(model: &SaeModel, info: &CheckpointInfo) -> Result<Vec<u8>> {
    model.validate()?;
    let (d, n) = (model.dim, model.latent_dim);
    let mut out = Vec::with_capacity(36 + n.div_ceil(8) + 4 * (2 * n * d + d + n));
    out.extend_from_slice(VSSA_MAGIC);
    out.extend_from_slice(&VSSA_VERSION.to_le_bytes());
    for v in [d, n, model.k] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let mut mask = vec![0u8; n.div_ceil(8)];
    for (j, &dead) in model.dead.iter().enumerate() {
        if dead {
            mask[j / 8] |= 1 << (j % 8);
        }
    }
    out.extend_from_slice(&mask);
    let push = |out: &mut Vec<u8>, vals: &[f64]| {
        for &v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    push(&mut out, &model.enc);
    push(&mut out, &model.decoder_matrix());
    push(&mut out, &model.pre_bias);
    push(&mut out, &model.enc_bias);
    let info = CheckpointInfo {
        selection: model.selection,
        ..info.clone()
    };
    let json = serde_json::to_vec(&info).map_err(|e| Error::Format(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<(SaeModel, CheckpointInfo)> {
    if bytes.len() < 4 || &bytes[..4] != VSSA_MAGIC {
        return Err(Error::Format("missing VSSA magic".into()));
    }
    let mut r = ByteReader::new(bytes);
    r.take(4)?;
    let version = r.u32()?;
    if version != VSSA_VERSION {
        return Err(Error::Format(format!("unsupported VSSA version {version}")));
    }
    let mut dims = [0usize; 3];
    for slot in &mut dims {
        *slot = usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension".into()))?;
    }
    let [d, n, k] = dims;
    let tensor_len = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(2))
        .and_then(|t| t.checked_add(n + d))
        .and_then(|t| t.checked_mul(4))
        .ok_or_else(|| Error::Format("tensor sizes overflow".into()))?;
    let mask = r.take(n.div_ceil(8))?;
    let dead: Vec<bool> = (0..n).map(|j| mask[j / 8] & (1 << (j % 8)) != 0).collect();
    if n % 8 != 0 && mask[n / 8] >> (n % 8) != 0 {
        return Err(Error::Format("dead mask has bits past latent_dim".into()));
    }
    let raw = r.take(tensor_len)?;
    let mut vals = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    let mut grab = |len: usize| -> Vec<f64> { vals.by_ref().take(len).collect() };
    let enc = grab(n * d);
    let dec = grab(d * n);
    let pre_bias = grab(d);
    let enc_bias = grab(n);
    let trailer_len =
        usize::try_from(r.u64()?).map_err(|_| Error::Format("trailer length".into()))?;
    let json = r.take(trailer_len)?;
    if !r.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after trailer",
            r.remaining()
        )));
    }
    let info: CheckpointInfo =
        serde_json::from_slice(json).map_err(|e| Error::Format(format!("trailer: {e}")))?;
    let model = SaeModel::from_parts(d, n, k, enc, dec, pre_bias, enc_bias, dead)
        .map_err(|e| match e {
            Error::Shape { .. } | Error::Config(_) => Error::Format(e.to_string()),
            other => other,
        })?
        .with_selection(info.selection);
    Ok((model, info))
}

pub fn save_model(model: &SaeModel, info: &CheckpointInfo, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(model, info)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(SaeModel, CheckpointInfo)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
