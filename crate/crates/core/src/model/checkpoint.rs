use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::network::SaliencyModel;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOES";
pub const VERSION: u32 = 1;
const HASH_LEN: usize = 32;

/// Serializes a value to JSON with object keys sorted, so equal configs
/// produce identical bytes.
pub fn canonical_json<T: serde::Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is ordered by key.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// SHA-256 of the canonical JSON form, hex encoded.
pub fn config_hash<T: serde::Serialize>(value: &T) -> Result<String> {
    let json = canonical_json(value)?;
    Ok(hex(&Sha256::digest(json.as_bytes())))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Encodes the model as `MOES | version | json_len | json | sha256(json) | params`.
pub fn encode(model: &SaliencyModel) -> Result<Vec<u8>> {
    let json = canonical_json(model.config())?;
    let json_len = u32::try_from(json.len()).map_err(|_| Error::usage("config JSON too large"))?;
    let mut out = Vec::with_capacity(48 + json.len() + model.graph().num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&json_len.to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&Sha256::digest(json.as_bytes()));
    for p in model.graph().params() {
        for v in p.value().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a checkpoint, checking the magic, version, config hash and
/// parameter payload length.
pub fn decode(bytes: &[u8], path: &Path) -> Result<SaliencyModel> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(fail(0, "missing MOES magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(4, format!("unsupported checkpoint version {version}")));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json_end = 12 + json_len;
    if bytes.len() < json_end + HASH_LEN {
        return Err(fail(8, "truncated config header".into()));
    }
    let json = &bytes[12..json_end];
    let stored = &bytes[json_end..json_end + HASH_LEN];
    if Sha256::digest(json).as_slice() != stored {
        return Err(fail(json_end, "config hash mismatch".into()));
    }
    let config: ModelConfig =
        serde_json::from_slice(json).map_err(|e| fail(12, format!("config JSON: {e}")))?;
    let mut model = SaliencyModel::build(&config, 0)?;
    let payload = &bytes[json_end + HASH_LEN..];
    let expected = model.graph().num_scalars() * 8;
    if payload.len() != expected {
        return Err(fail(
            json_end + HASH_LEN,
            format!("parameter payload is {} bytes, expected {expected}", payload.len()),
        ));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let ids: Vec<_> = model.graph().param_ids().collect();
    for id in ids {
        for slot in model.graph_mut().param_data_mut(id) {
            *slot = values.next().expect("length checked");
        }
    }
    Ok(model)
}

pub fn save(model: &SaliencyModel, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SaliencyModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
