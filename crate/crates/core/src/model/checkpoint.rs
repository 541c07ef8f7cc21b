//! Versioned parameter checkpoints: a little-endian binary record that
//! round-trips bit-exactly, and a JSON record for inspection.
//!
//! Binary layout: magic `MPTTGRU\0`, `u32` version, `u32` H, D_in, K,
//! `u32` block count, then per block: `u32` name length, UTF-8 name,
//! `u32` rows, `u32` cols, `rows * cols` `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{Block, GruDims, GruParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MPTTGRU\0";

#[derive(Debug, Serialize, Deserialize)]
struct JsonCheckpoint {
    version: u32,
    dims: GruDims,
    arrays: Vec<JsonArray>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonArray {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

pub fn write_binary<W: Write>(params: &GruParams, mut w: W) -> std::io::Result<()> {
    let d = params.dims();
    w.write_all(MAGIC)?;
    for v in [CHECKPOINT_VERSION, d.hidden as u32, d.input as u32, d.output as u32, Block::ALL.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for b in Block::ALL {
        let (rows, cols) = b.shape(d);
        let name = b.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(rows as u32).to_le_bytes())?;
        w.write_all(&(cols as u32).to_le_bytes())?;
        for v in params.block(b) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_binary<R: Read>(mut r: R) -> Result<GruParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Data("not a GRU checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let dims = GruDims::new(read_u32(&mut r)? as usize, read_u32(&mut r)? as usize, read_u32(&mut r)? as usize)?;
    let count = read_u32(&mut r)? as usize;
    let mut params = GruParams::zeros(dims);
    let mut filled = vec![false; Block::ALL.len()];
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Data("block name is not UTF-8".into()))?;
        let block = Block::from_name(&name).ok_or_else(|| Error::Data(format!("unknown block '{name}'")))?;
        let shape = (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
        if shape != block.shape(dims) {
            return Err(Error::Shape(format!("block '{name}' has shape {shape:?}, expected {:?}", block.shape(dims))));
        }
        for v in params.block_mut(block) {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))?;
            *v = f64::from_le_bytes(buf);
        }
        filled[Block::ALL.iter().position(|b| *b == block).expect("listed")] = true;
    }
    if filled.iter().any(|f| !f) {
        return Err(Error::Data("checkpoint is missing parameter blocks".into()));
    }
    Ok(params)
}

pub fn to_json(params: &GruParams) -> Result<String> {
    let d = params.dims();
    let ck = JsonCheckpoint {
        version: CHECKPOINT_VERSION,
        dims: d,
        arrays: Block::ALL
            .iter()
            .map(|b| {
                let (r, c) = b.shape(d);
                JsonArray {
                    name: b.name().to_string(),
                    shape: [r, c],
                    data: params.block(*b).to_vec(),
                }
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&ck)?)
}

pub fn from_json(s: &str) -> Result<GruParams> {
    let ck: JsonCheckpoint = serde_json::from_str(s)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {}", ck.version)));
    }
    let mut params = GruParams::zeros(ck.dims);
    for a in ck.arrays {
        let block = Block::from_name(&a.name).ok_or_else(|| Error::Data(format!("unknown block '{}'", a.name)))?;
        let (r, c) = block.shape(ck.dims);
        if a.shape != [r, c] || a.data.len() != r * c {
            return Err(Error::Shape(format!("block '{}' does not match {:?}", a.name, ck.dims)));
        }
        params.block_mut(block).copy_from_slice(&a.data);
    }
    Ok(params)
}

pub fn save(params: &GruParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_binary(params, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<GruParams> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_binary(std::io::BufReader::new(file))
}
