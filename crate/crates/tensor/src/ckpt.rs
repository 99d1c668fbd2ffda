//! Checkpoint archive: a JSON header followed by flat named f64 tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "FFTENSR1" | u64 header_len | header JSON | u64 n_tensors
//! per tensor: u64 name_len | name utf8 | u8 ndim | u64 dims... | f64 data...
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::rng::fnv1a;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FFTENSR1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub step: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum CkptError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Malformed(String),
    #[error("header json: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn save(path: &Path, header: &CheckpointHeader, store: &ParamStore) -> Result<(), CkptError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let hdr = serde_json::to_vec(header)?;
    w.write_all(&(hdr.len() as u64).to_le_bytes())?;
    w.write_all(&hdr)?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, ParamStore), CkptError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CkptError::Malformed("wrong magic".into()));
    }
    let hdr_len = read_u64(&mut r)? as usize;
    let mut hdr = vec![0u8; hdr_len];
    r.read_exact(&mut hdr)?;
    let header: CheckpointHeader = serde_json::from_slice(&hdr)?;
    if header.format_version != FORMAT_VERSION {
        return Err(CkptError::Malformed(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    let n = read_u64(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name_len = read_u64(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CkptError::Malformed("tensor name not utf8".into()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        store.insert(&name, Tensor::new(&shape, data));
    }
    Ok((header, store))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CkptError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Stable content hash of a checkpoint file, hex-encoded.
pub fn file_hash(path: &Path) -> Result<String, CkptError> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:016x}", fnv1a(&bytes)))
}
