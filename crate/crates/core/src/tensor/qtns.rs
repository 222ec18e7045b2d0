//! QTNS single-tensor files.
//!
//! ```text
//! "QTNS" | u16 version = 1 | u8 dtype (0=f32 1=i8 2=i16 3=i32) | u8 rank
//!        | rank × u32 extents | raw little-endian buffer
//! ```

use std::path::Path;

use super::{DType, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QTNS";
pub const VERSION: u16 = 1;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + t.byte_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.dtype().code());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a QTNS file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported QTNS version {version}")));
    }
    let dtype = DType::from_code(bytes[6])?;
    let rank = bytes[7] as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated QTNS header".into()));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let expected = n * dtype.size();
    if bytes.len() - header != expected {
        return Err(Error::Format(format!("QTNS payload is {} bytes, expected {expected}", bytes.len() - header)));
    }
    Tensor::from_le_bytes(dtype, shape, &bytes[header..])
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}
