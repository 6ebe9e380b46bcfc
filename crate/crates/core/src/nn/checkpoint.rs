//! Parameter checkpoints.
//!
//! Layout: magic `SNDY`, version `u16` LE, header length `u32` LE, a JSON
//! header `{"params": [{"name", "shape"}], "meta": ...}`, then every
//! parameter's values as `f64` LE in header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SNDY";
pub const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    params: Vec<Entry>,
    meta: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(w: &mut W, params: &ParamSet, meta: &serde_json::Value) -> Result<()> {
    let header = Header {
        params: params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    for t in params.tensors() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ParamSet, serde_json::Value)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let mut json = vec![0u8; u32::from_le_bytes(b4) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut params = ParamSet::new();
    let mut b8 = [0u8; 8];
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        params.add(e.name, Tensor::new(e.shape, data)?);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    Ok((params, header.meta))
}
