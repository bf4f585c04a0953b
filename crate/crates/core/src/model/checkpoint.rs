//! Binary checkpoint container.
//!
//! ```text
//! b"POSELAB1"
//! u64 LE   config JSON length
//! [u8]     ModelConfig as JSON
//! u64 LE   parameter count
//! [f64 LE] parameters in ParamLayout order
//! ```

use std::path::Path;

use super::config::ModelConfig;
use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const MAGIC: &[u8; 8] = b"POSELAB1";

pub fn encode(params: &ParameterSet) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&params.config)?;
    let n = params.weights.data.len();
    let mut out = Vec::with_capacity(8 + 8 + json.len() + 8 + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for w in &params.weights.data {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Parse {
        offset: *at as u64,
        message: format!("truncated checkpoint while reading {what}"),
    })?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn read_u64(bytes: &[u8], at: &mut usize, what: &str) -> Result<u64> {
    let s = take(bytes, at, 8, what)?;
    Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")))
}

pub fn decode(bytes: &[u8]) -> Result<ParameterSet> {
    let mut at = 0;
    if take(bytes, &mut at, 8, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a POSELAB1 checkpoint".into(),
        });
    }
    let json_len = read_u64(bytes, &mut at, "config length")? as usize;
    let json_at = at as u64;
    let config: ModelConfig = serde_json::from_slice(take(bytes, &mut at, json_len, "config")?).map_err(|e| {
        Error::Parse {
            offset: json_at,
            message: format!("bad config JSON: {e}"),
        }
    })?;
    let count_at = at as u64;
    let n = read_u64(bytes, &mut at, "parameter count")? as usize;
    let raw = take(bytes, &mut at, n.saturating_mul(8), "parameters")?;
    if at != bytes.len() {
        return Err(Error::Parse {
            offset: at as u64,
            message: "trailing bytes after parameters".into(),
        });
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ParameterSet::from_weights(&config, data).map_err(|e| Error::Parse {
        offset: count_at,
        message: e.to_string(),
    })
}

pub fn save(path: &Path, params: &ParameterSet) -> Result<()> {
    write_atomic(path, &encode(params)?)
}

pub fn load(path: &Path) -> Result<ParameterSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
