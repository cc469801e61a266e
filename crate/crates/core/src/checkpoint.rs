//! Binary checkpoint of a parameter store.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SHDWPEFT" | version u32 | count u64
//! per entry: name_len u32 | name (UTF-8) | trainable u8 | dtype u8 (0 = f32, 1 = f64)
//!            | rank u32 | extents u64 × rank | payload, row-major IEEE-754
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DType, Tensor};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"SHDWPEFT";
pub const VERSION: u32 = 1;

// Guards against allocating from a corrupt header.
const MAX_NAME: usize = 1 << 16;
const MAX_RANK: usize = 8;

pub fn write_store(out: &mut impl Write, store: &ParamStore) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u64).to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[p.trainable() as u8])?;
        let dtype = p.tensor.dtype();
        out.write_all(&[match dtype {
            DType::F32 => 0,
            DType::F64 => 1,
        }])?;
        out.write_all(&(p.tensor.shape().len() as u32).to_le_bytes())?;
        for &e in p.tensor.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        for &x in p.tensor.data() {
            match dtype {
                DType::F32 => out.write_all(&(x as f32).to_le_bytes())?,
                DType::F64 => out.write_all(&x.to_le_bytes())?,
            }
        }
    }
    Ok(())
}

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(input)?))
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(input)?))
}

pub fn read_store(input: &mut impl Read) -> Result<ParamStore> {
    if &read_array::<8>(input)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = read_u64(input)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(input)? as usize;
        if len > MAX_NAME {
            return Err(Error::Checkpoint(format!("name length {len} too large")));
        }
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let [trainable] = read_array::<1>(input)?;
        if trainable > 1 {
            return Err(Error::Checkpoint(format!("`{name}`: bad trainable flag {trainable}")));
        }
        let dtype = match read_array::<1>(input)? {
            [0] => DType::F32,
            [1] => DType::F64,
            [t] => return Err(Error::Checkpoint(format!("`{name}`: unknown dtype tag {t}"))),
        };
        let rank = read_u32(input)? as usize;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("`{name}`: rank {rank} too large")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(input).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape overflows")))?;
        let mut data = Vec::with_capacity(numel.min(1 << 24));
        for _ in 0..numel {
            data.push(match dtype {
                DType::F32 => f32::from_le_bytes(read_array(input)?) as f64,
                DType::F64 => f64::from_le_bytes(read_array(input)?),
            });
        }
        let tensor = Tensor::new(&shape, data)?.with_dtype(dtype);
        store.insert(name, tensor, trainable == 1)?;
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last entry".into()));
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_store(&mut out, store)?;
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    read_store(&mut BufReader::new(File::open(path)?))
}

/// Bitwise equality of names, flags, dtypes, shapes and payloads, in order.
pub fn stores_identical(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|(x, y)| {
            x.name == y.name
                && x.trainable() == y.trainable()
                && x.tensor.dtype() == y.tensor.dtype()
                && x.tensor.bitwise_eq(&y.tensor)
        })
}
