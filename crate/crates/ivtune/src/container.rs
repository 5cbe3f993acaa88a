//! Named-tensor container file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "IVTN"
//! version u32      currently 1
//! count   u32      number of entries
//! entry:
//!   name_len u32, name bytes (UTF-8, non-empty, unique)
//!   dtype    u8   0 = f32, 1 = f64
//!   rank     u32
//!   dims     rank × u64
//!   data     numel × 4 or 8 bytes, IEEE-754 little-endian
//! ```
//!
//! Round trips are bit-exact in both precisions: values are moved through
//! their raw bit patterns and `f32`-tagged tensors only ever hold values
//! exactly representable in `f32`.

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"IVTN";
pub const VERSION: u32 = 1;

pub fn save_container(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_container(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    read_container(&mut r)
}

pub fn write_container<W: Write>(w: &mut W, entries: &[(String, Tensor)]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for (name, _) in entries {
        if name.is_empty() {
            return Err(Error::Format("empty tensor name".into()));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
    }
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Format("too many entries".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u32::try_from(name_bytes.len())
            .map_err(|_| Error::Format(format!("name too long: `{name}`")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[tensor.dtype().code()])?;
        let rank = u32::try_from(tensor.shape().len()).unwrap();
        w.write_all(&rank.to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match tensor.dtype() {
            DType::F32 => {
                for &v in tensor.data() {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            DType::F64 => {
                for &v in tensor.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_container<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let count = read_u32(r, "entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    for i in 0..count {
        let name_len = read_u32(r, "name length")? as usize;
        if name_len == 0 {
            return Err(Error::Format(format!("entry {i}: empty name")));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        let mut dtype_code = [0u8; 1];
        read_exact(r, &mut dtype_code, "dtype")?;
        let dtype = DType::from_code(dtype_code[0])?;
        let rank = read_u32(r, "rank")? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("entry `{name}`: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(r, "dim")?;
            if d == 0 {
                return Err(Error::Format(format!("entry `{name}`: zero dimension")));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("entry `{name}`: size overflow")))?;
            shape.push(d as usize);
        }
        if numel > (1 << 34) {
            return Err(Error::Format(format!("entry `{name}`: implausibly large")));
        }
        let numel = numel as usize;
        let mut data = Vec::with_capacity(numel);
        match dtype {
            DType::F32 => {
                let mut buf = vec![0u8; numel * 4];
                read_exact(r, &mut buf, "values")?;
                for c in buf.chunks_exact(4) {
                    data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
                }
            }
            DType::F64 => {
                let mut buf = vec![0u8; numel * 8];
                read_exact(r, &mut buf, "values")?;
                for c in buf.chunks_exact(8) {
                    data.push(f64::from_le_bytes([
                        c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                    ]));
                }
            }
        }
        let tensor = Tensor::new(shape, data)?.to_dtype(dtype);
        entries.push((name, tensor));
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing)? {
        0 => Ok(entries),
        _ => Err(Error::Format("trailing bytes after last entry".into())),
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated file while reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}
