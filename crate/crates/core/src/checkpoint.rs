//! Binary model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "BATM" | version u32 | record count u32
//! record*: name_len u32 | name (UTF-8) | rank u32 | dims u64 × rank | f64 × Π dims
//! trailer: json_len u64 | hyperparameters as JSON
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::ntm::{ModelError, ModelHyper, ModelParams, PARAM_NAMES};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BATM";
pub const CHECKPOINT_VERSION: u32 = 1;
const BACKGROUND: &str = "background";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u64(out, d as u64);
    }
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, (PARAM_NAMES.len() + 1) as u32);
    for (name, m) in params.tensors() {
        put_record(&mut out, name, &[m.rows(), m.cols()], m.data());
    }
    let bg = params.background();
    put_record(&mut out, BACKGROUND, &[bg.len()], bg);
    let json = serde_json::to_vec(&params.hyper).expect("hyperparameters serialize");
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> CheckpointError {
        CheckpointError::Corrupt {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(self.corrupt(format!(
                "unexpected end of file (need {n} bytes, {} remain)",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Record {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
    offset: usize,
}

fn read_record(r: &mut Reader) -> Result<Record, CheckpointError> {
    let offset = r.pos;
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| r.corrupt("record name is not UTF-8"))?
        .to_string();
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(r.corrupt(format!("implausible rank {rank} for {name}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u64()? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.corrupt(format!("dimension overflow for {name}")))?;
    let bytes_needed = count
        .checked_mul(8)
        .ok_or_else(|| r.corrupt(format!("dimension overflow for {name}")))?;
    let raw = r.take(bytes_needed)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Record {
        name,
        dims,
        data,
        offset,
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Corrupt {
            offset: 0,
            reason: "bad magic (expected \"BATM\")".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Corrupt {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let n = r.u32()? as usize;
    let mut records = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        records.push(read_record(&mut r)?);
    }
    let trailer_at = r.pos;
    let json_len = r.u64()? as usize;
    let hyper: ModelHyper = serde_json::from_slice(r.take(json_len)?).map_err(|e| CheckpointError::Corrupt {
        offset: trailer_at,
        reason: format!("hyperparameter trailer: {e}"),
    })?;
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let find = |name: &str| {
        records.iter().find(|rec| rec.name == name).ok_or(CheckpointError::Corrupt {
            offset: trailer_at,
            reason: format!("missing record {name:?}"),
        })
    };
    let bg = find(BACKGROUND)?;
    let mut params = ModelParams::zeros(hyper, bg.data.clone()).map_err(|e| CheckpointError::Corrupt {
        offset: bg.offset,
        reason: e.to_string(),
    })?;
    for (name, slot) in params.tensors_mut() {
        let rec = find(name)?;
        let expected = slot.shape();
        if rec.dims != [expected.0, expected.1] {
            return Err(CheckpointError::Corrupt {
                offset: rec.offset,
                reason: format!("{name} has dims {:?}, expected {:?}", rec.dims, expected),
            });
        }
        *slot = Matrix::from_vec(expected.0, expected.1, rec.data.clone()).expect("dims checked");
    }
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(params)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<ModelParams, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}
