//! AVCK checkpoints.
//!
//! Layout, all integers u32 little-endian:
//! `b"AVCK"`, config JSON length, config JSON, parameter count, then per
//! parameter: name length, UTF-8 name, rows, cols, `rows * cols` f64 LE.
//! A parameter of shape `[a, b, c]` is stored as `rows = a`, `cols = b * c`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AvacaConfig, ModelParameters};
use crate::numerics::Array;
use crate::objectives::LossConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVCK";

/// Architecture and objective settings stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: AvacaConfig,
    pub loss: LossConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub params: ModelParameters,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Parameter(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(params: &ModelParameters, config: &CheckpointConfig) -> Result<Vec<u8>> {
    let json = serde_json::to_string(config)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.scalar_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(json.as_bytes());
    put_u32(&mut out, params.len())?;
    for (name, array) in params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, array.rows())?;
        put_u32(&mut out, array.cols())?;
        for v in array.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("{what} needs {n} bytes at offset {}, {} left", self.pos, self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            expected: "AVCK".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let json_len = cur.u32("config length")?;
    let json = cur.take(json_len, "config")?;
    let config: CheckpointConfig =
        serde_json::from_slice(json).map_err(|e| bad(format!("config JSON: {e}")))?;
    config.model.validate()?;

    let count = cur.u32("parameter count")?;
    let mut raw = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = cur.u32("name length")?;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| bad("parameter name is not UTF-8".into()))?
            .to_string();
        let rows = cur.u32("rows")?;
        let cols = cur.u32("cols")?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad(format!("{name}: {rows}x{cols} overflows")))?;
        let payload = cur.take(n, &name)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        raw.push((name, rows, cols, data));
    }
    if cur.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }

    let layout = config.model.parameter_layout();
    let mut params = ModelParameters::default();
    for (name, rows, cols, data) in raw {
        let Some((_, shape, _)) = layout.iter().find(|(n, _, _)| *n == name) else {
            return Err(bad(format!("unknown parameter {name:?} for this architecture")));
        };
        let expected_rows = shape[0];
        let expected_cols: usize = shape[1..].iter().product();
        if (rows, cols) != (expected_rows, expected_cols) {
            return Err(bad(format!(
                "{name}: stored {rows}x{cols}, architecture needs {expected_rows}x{expected_cols}"
            )));
        }
        if params.insert(name.clone(), Array::new(shape.clone(), data)?).is_some() {
            return Err(bad(format!("duplicate parameter {name:?}")));
        }
    }
    params
        .check_layout(&config.model)
        .map_err(|e| bad(e.to_string()))?;
    Ok(Checkpoint { config, params })
}

pub fn save_checkpoint(params: &ModelParameters, config: &CheckpointConfig, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, config)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}
