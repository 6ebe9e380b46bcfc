//! Binary transition dataset format.
//!
//! Layout (little-endian):
//! `"CODA"`, `u16` version, `u32` space-JSON length, space JSON, `u64` record
//! count, then per record `s`, `a`, `s'` and `reward` as `f64`, followed by
//! the terminal flag and the provenance tag as one byte each.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::{Error, FactoredSpace, Provenance, Result, Transition};

pub const MAGIC: &[u8; 4] = b"CODA";
pub const VERSION: u16 = 1;

/// A dataset held in memory: one space shared by every record.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub space: Arc<FactoredSpace>,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    /// Fails with `SpaceMismatch` if any transition lives in another space.
    pub fn new(space: Arc<FactoredSpace>, transitions: Vec<Transition>) -> Result<Self> {
        if transitions.iter().any(|t| **t.space() != *space) {
            return Err(Error::SpaceMismatch);
        }
        Ok(Dataset { space, transitions })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        write_dataset(w, &self.space, &self.transitions)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        read_dataset(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_dataset(BufReader::new(File::open(path)?))
    }
}

pub fn write_dataset<W: Write>(
    mut w: W,
    space: &FactoredSpace,
    transitions: &[Transition],
) -> Result<()> {
    let header = serde_json::to_vec(space)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Format("space descriptor too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&header_len.to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(transitions.len() as u64).to_le_bytes())?;
    let mut buf = Vec::new();
    for t in transitions {
        if *t.space().as_ref() != *space {
            return Err(Error::SpaceMismatch);
        }
        buf.clear();
        for v in t
            .s
            .values()
            .iter()
            .chain(t.a.values())
            .chain(t.s_next.values())
            .chain(std::iter::once(&t.reward))
        {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(t.terminal as u8);
        buf.push(t.provenance as u8);
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    Ok(b)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    if &read_exact::<_, 4>(&mut r)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    let space: Arc<FactoredSpace> = Arc::new(serde_json::from_slice(&header)?);
    let count = u64::from_le_bytes(read_exact(&mut r)?);
    let (ns, na) = (space.state_len(), space.action_len());
    let n_f64 = 2 * ns + na + 1;
    let mut rec = vec![0u8; n_f64 * 8 + 2];
    let mut transitions = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        r.read_exact(&mut rec)
            .map_err(|e| Error::Format(format!("record {i} truncated: {e}")))?;
        let vals: Vec<f64> = rec[..n_f64 * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let terminal = match rec[n_f64 * 8] {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("record {i}: bad terminal flag {v}"))),
        };
        let mut t = Transition::new(
            &space,
            vals[..ns].to_vec(),
            vals[ns..ns + na].to_vec(),
            vals[ns + na..2 * ns + na].to_vec(),
            vals[n_f64 - 1],
            terminal,
        )?;
        t.provenance = Provenance::from_u8(rec[n_f64 * 8 + 1])?;
        transitions.push(t);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(Dataset { space, transitions })
}
