//! Binary tensor container.
//!
//! Layout: the 8-byte magic `CILSEG01`, then one record per tensor until end
//! of stream. A record is the name length (u64 LE), the UTF-8 name bytes, the
//! rank (u64 LE), each extent (u64 LE) and the values as f64 LE.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CILSEG01";

pub fn write_tensors<'a, T, W, I>(mut out: W, tensors: I) -> Result<()>
where
    T: Scalar,
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
{
    out.write_all(MAGIC)?;
    for (name, tensor) in tensors {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(tensor.rank() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            out.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u64(input: &mut impl Read) -> Result<Option<u64>> {
    let mut buf = [0u8; 8];
    let mut filled = 0;
    while filled < 8 {
        let n = input.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(Error::Format("truncated integer field".into()));
        }
        filled += n;
    }
    Ok(Some(u64::from_le_bytes(buf)))
}

fn require_u64(input: &mut impl Read, what: &str) -> Result<u64> {
    read_u64(input)?.ok_or_else(|| Error::Format(format!("missing {what}")))
}

// Guards against allocating absurd buffers on corrupt input.
const MAX_FIELD: u64 = 1 << 32;

pub fn read_tensors<T: Scalar>(mut input: impl Read) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("missing container header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, expected CILSEG01".into()));
    }
    let mut out = Vec::new();
    while let Some(name_len) = read_u64(&mut input)? {
        if name_len > MAX_FIELD {
            return Err(Error::Format(format!("name length {name_len} too large")));
        }
        let mut name = vec![0u8; name_len as usize];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = require_u64(&mut input, "rank")?;
        if rank > 16 {
            return Err(Error::Format(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = require_u64(&mut input, "extent")?;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel > MAX_FIELD {
            return Err(Error::Format(format!("tensor {name} too large")));
        }
        let mut data = Vec::with_capacity(numel as usize);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            input.read_exact(&mut buf)?;
            data.push(T::of(f64::from_le_bytes(buf)));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        out.push((name, tensor));
    }
    Ok(out)
}
