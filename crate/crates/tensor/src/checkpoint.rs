//! Binary tensor checkpoints.
//!
//! Layout (little-endian): magic `CDSTCKPT`, version `u32`, entry count
//! `u32`, then per entry: name length `u32`, UTF-8 name, rank `u32`,
//! dims `u32[rank]`, `f64` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CDSTCKPT";
pub const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| TensorError::Checkpoint(format!("{what} {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint<'t, W: Write>(w: &mut W, entries: impl IntoIterator<Item = (&'t str, &'t Tensor)>) -> Result<()> {
    let entries: Vec<_> = entries.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    put_u32(w, entries.len(), "entry count")?;
    for (name, t) in entries {
        put_u32(w, name.len(), "name length")?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape().len(), "rank")?;
        for &d in t.shape() {
            put_u32(w, d, "dimension")?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = get_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Checkpoint("entry name is not UTF-8".into()))?;
        let rank = get_u32(r)? as usize;
        let dims = (0..rank).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    Ok(out)
}

pub fn save<'t>(path: &Path, entries: impl IntoIterator<Item = (&'t str, &'t Tensor)>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
