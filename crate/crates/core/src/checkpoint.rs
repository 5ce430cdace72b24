//! Binary parameter checkpoint, little-endian throughout.
//!
//! Layout: magic "MLPR", format version u32, tensor count u32; then per
//! tensor: name length u16, name bytes, rank u8, dims as u64s, data as
//! f64s. Floats are written as raw bit patterns so round-trips are
//! bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"MLPR";
const VERSION: u32 = 1;

pub fn save(path: impl AsRef<Path>, entries: &[(String, &Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name_bytes)?;
        let rank = u8::try_from(tensor.shape().len())
            .map_err(|_| Error::Checkpoint("tensor rank exceeds u8".into()))?;
        w.write_all(&[rank])?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut r = std::io::BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_bits(u64::from_le_bytes(buf)));
        }
        entries.push((name.clone(), Tensor::new(shape, data).map_err(|e| {
            Error::Checkpoint(format!("tensor {name}: {e}"))
        })?));
    }
    Ok(entries)
}

/// Saves every entry of a parameter store (trainable and not) in insertion
/// order, optionally preceded by extra named tensors (pipeline state).
pub fn save_store(
    path: impl AsRef<Path>,
    store: &ParamStore,
    extra: &[(String, &Tensor)],
) -> Result<()> {
    let mut entries: Vec<(String, &Tensor)> = extra.to_vec();
    for (name, entry) in store.iter() {
        entries.push((name.to_string(), &entry.tensor));
    }
    save(path, &entries)
}

/// Loads a checkpoint back into a store built from the same configuration.
/// Every store entry must be present with a matching shape; extra tensors
/// are returned for the caller (pipeline state).
pub fn load_into_store(
    path: impl AsRef<Path>,
    store: &mut ParamStore,
) -> Result<Vec<(String, Tensor)>> {
    let entries = load(path)?;
    let mut extra = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (name, tensor) in entries {
        if store.contains(&name) {
            let target = store.get_mut(&name)?;
            if target.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    target.shape()
                )));
            }
            target.data_mut().copy_from_slice(tensor.data());
            seen.insert(name);
        } else {
            extra.push((name, tensor));
        }
    }
    let missing: Vec<String> = store
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| !seen.contains(n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint is missing {} tensors (first: {})",
            missing.len(),
            missing[0]
        )));
    }
    Ok(extra)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
