//! Binary parameter container.
//!
//! ```text
//! magic    8 bytes  "DFADCKPT"
//! version  u32 LE
//! header   u32 LE length + UTF-8 JSON (model kind, configs, schedule)
//! count    u32 LE
//! count × { name: u32 len + UTF-8, rank: u32, dims: rank × u32, values: f32 LE row-major }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParameterSet, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DFADCKPT";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

pub fn write_checkpoint<R: Real>(
    w: &mut impl Write,
    header: &serde_json::Value,
    params: &ParameterSet<R>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    let hdr = serde_json::to_vec(header)?;
    put_u32(w, hdr.len() as u32)?;
    w.write_all(&hdr)?;
    put_u32(w, params.len() as u32)?;
    for (name, t) in params.iter() {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            put_u32(w, d as u32)?;
        }
        for &v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Real>(r: &mut impl Read) -> Result<(serde_json::Value, ParameterSet<R>)> {
    let magic = get_bytes(r, 8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = get_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = get_u32(r)? as usize;
    let header: serde_json::Value = serde_json::from_slice(&get_bytes(r, hlen)?)?;
    let count = get_u32(r)?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let nlen = get_u32(r)? as usize;
        let name = String::from_utf8(get_bytes(r, nlen)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = get_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(get_u32(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = get_bytes(r, n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| R::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
        params.insert(name, t);
    }
    Ok((header, params))
}

pub fn save<R: Real>(path: &Path, header: &serde_json::Value, params: &ParameterSet<R>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, header, params)?;
    w.flush()?;
    Ok(())
}

pub fn load<R: Real>(path: &Path) -> Result<(serde_json::Value, ParameterSet<R>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}
