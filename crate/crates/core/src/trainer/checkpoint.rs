//! Binary parameter files: a header with a version and a `(name, shape)`
//! index, then little-endian `f64` data per tensor in index order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{io_error, Result, TrainError};
use crate::autodiff::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialises every tensor of `store`.
pub fn write_checkpoint(out: &mut impl Write, store: &ParamStore) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        let shape = p.value.shape();
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let file = File::create(path).map_err(io_error(path))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, store).map_err(io_error(path))?;
    w.flush().map_err(io_error(path))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads all `(name, tensor)` entries of a checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(io_error(path))?;
    let mut r = BufReader::new(file);
    let bad = |message: String| TrainError::Format {
        path: path.to_path_buf(),
        message,
    };
    let io = io_error(path);
    let mut magic = [0; 4];
    r.read_exact(&mut magic).map_err(|e| bad(format!("unreadable header: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r).map_err(|e| bad(e.to_string()))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r).map_err(|e| bad(e.to_string()))?;
    let mut index = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r).map_err(|e| bad(e.to_string()))? as usize;
        let mut name = vec![0; len];
        r.read_exact(&mut name).map_err(|e| bad(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r).map_err(|e| bad(e.to_string()))?;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| bad(e.to_string()))?;
        index.push((name, shape));
    }
    let mut out = Vec::with_capacity(index.len());
    for (name, shape) in index {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0; 8];
            r.read_exact(&mut b).map_err(|e| bad(format!("truncated data for `{name}`: {e}")))?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(out)
}

/// Overwrites every parameter of `store` from a checkpoint, which must hold
/// exactly the same names and shapes.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<()> {
    let mut entries = read_checkpoint(path)?;
    for (name, t) in &entries {
        let id = store.id(name).ok_or_else(|| TrainError::Unexpected(name.clone()))?;
        let expected = store.value(id).shape();
        if expected != t.shape() {
            return Err(TrainError::Shape {
                name: name.clone(),
                expected: expected.to_vec(),
                found: t.shape().to_vec(),
            });
        }
    }
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        let pos = entries
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| TrainError::Missing(name.clone()))?;
        let (_, t) = entries.swap_remove(pos);
        let id = store.id(&name).expect("name taken from the store");
        *store.value_mut(id) = t;
    }
    Ok(())
}
