//! Binary parameter blocks: a versioned header followed by named
//! little-endian `f32` tensors.
//!
//! ```text
//! magic "ODOPARAM" | version u32 | count u32
//! per tensor: name_len u32 | name utf-8 | rank u32 | dims u64 x rank | data f32 x prod(dims)
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 8] = b"ODOPARAM";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

fn io_err(e: std::io::Error) -> Error {
    Error::parse("parameter block", e.to_string())
}

pub fn write_params<W: Write>(mut w: W, params: &[NamedTensor]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io_err)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_params<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != PARAMS_MAGIC {
        return Err(Error::parse("parameter block", "bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != PARAMS_VERSION {
        return Err(Error::parse(
            "parameter block",
            format!("unsupported version {version}"),
        ));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::parse("parameter block", "name too long"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|e| Error::parse("parameter block", e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::parse("parameter block", format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io_err)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        if len > 1 << 28 {
            return Err(Error::parse("parameter block", format!("tensor `{name}` too large")));
        }
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw).map_err(io_err)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(NamedTensor {
            name,
            tensor: Tensor::new(&shape, data)?,
        });
    }
    Ok(out)
}
