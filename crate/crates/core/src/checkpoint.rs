//! Binary tensor container.
//!
//! Layout (little endian): `b"AFIN"`, `u32` format version, `u32` tensor
//! count, then per tensor `u32` name length, UTF-8 name, `u8` dtype
//! (1 = f32, 2 = f64), `u32` rank, `u64` dims, payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{AfinError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AFIN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(&str, &Tensor)], dtype: Dtype) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(
        &u32::try_from(tensors.len())
            .map_err(|_| bad("too many tensors"))?
            .to_le_bytes(),
    )?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[dtype as u8])?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        match dtype {
            Dtype::F64 => {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Dtype::F32 => {
                for v in t.data() {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> AfinError {
    AfinError::Checkpoint(msg.into())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| bad(format!("truncated file: {e}")))?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

/// Tensors of rank 0 and 1 come back as `1 × 1` and `n × 1`.
pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    if &read_array::<4>(&mut r)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| bad(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let dtype = read_array::<1>(&mut r)?[0];
        let rank = read_u32(&mut r)?;
        if rank > 2 {
            return Err(bad(format!("{name}: rank {rank} not supported")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let (rows, cols) = match dims[..] {
            [] => (1, 1),
            [n] => (n, 1),
            [a, b] => (a, b),
            _ => unreachable!(),
        };
        let n = rows.checked_mul(cols).ok_or_else(|| bad("dims overflow"))?;
        let data = match dtype {
            2 => (0..n)
                .map(|_| Ok(f64::from_le_bytes(read_array(&mut r)?)))
                .collect::<Result<Vec<_>>>()?,
            1 => (0..n)
                .map(|_| Ok(f32::from_le_bytes(read_array(&mut r)?) as f64))
                .collect::<Result<Vec<_>>>()?,
            other => return Err(bad(format!("{name}: unknown dtype code {other}"))),
        };
        out.push((name, Tensor::from_vec(rows, cols, data)));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &[(&str, &Tensor)], dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    // write next to the target, then rename, so a crash never leaves half a file
    let tmp = path.with_extension("afin.tmp");
    write_tensors(BufWriter::new(File::create(&tmp)?), tensors, dtype)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_tensors(BufReader::new(File::open(path)?))
}
