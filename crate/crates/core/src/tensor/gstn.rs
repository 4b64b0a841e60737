//! GSTN: a minimal binary tensor container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "GSTN"
//! rank    u32
//! extents rank * u64
//! data    product(extents) * f64, row-major
//! ```
//!
//! A rank-0 scalar is therefore exactly 16 bytes. Decoding validates the
//! magic, the extents (no zeros, no overflow), the byte length, and that
//! every element is finite; errors carry the byte offset of the failure.

use std::fs;
use std::path::Path;

use crate::{Error, Result, Tensor};

const MAGIC: &[u8; 4] = b"GSTN";

/// Maximum rank accepted by the decoder; guards against garbage headers
/// asking for enormous extent lists.
const MAX_RANK: u32 = 32;

pub fn write_tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + t.rank() * 8 + t.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_tensor_bytes(bytes: &[u8]) -> Result<Tensor> {
    let take = |offset: usize, n: usize, what: &str| -> Result<&[u8]> {
        bytes.get(offset..offset + n).ok_or_else(|| Error::Decode {
            offset: bytes.len().min(offset),
            msg: format!("truncated {what}: need {n} bytes at offset {offset}"),
        })
    };

    let magic = take(0, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Decode {
            offset: 0,
            msg: format!("bad magic {magic:02x?}, expected \"GSTN\""),
        });
    }
    let rank = u32::from_le_bytes(take(4, 4, "rank")?.try_into().unwrap());
    if rank > MAX_RANK {
        return Err(Error::Decode {
            offset: 4,
            msg: format!("rank {rank} exceeds limit {MAX_RANK}"),
        });
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: usize = 1;
    for i in 0..rank as usize {
        let off = 8 + i * 8;
        let e = u64::from_le_bytes(take(off, 8, "extent")?.try_into().unwrap());
        if e == 0 {
            return Err(Error::Decode {
                offset: off,
                msg: format!("zero extent at axis {i}"),
            });
        }
        let e = usize::try_from(e).map_err(|_| Error::Decode {
            offset: off,
            msg: format!("extent {e} does not fit in usize"),
        })?;
        count = count.checked_mul(e).ok_or(Error::Decode {
            offset: off,
            msg: "element count overflows usize".into(),
        })?;
        shape.push(e);
    }
    let data_off = 8 + rank as usize * 8;
    let expected = data_off + count * 8;
    if bytes.len() != expected {
        return Err(Error::Decode {
            offset: bytes.len().min(expected),
            msg: format!("payload is {} bytes, expected {expected}", bytes.len()),
        });
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = data_off + i * 8;
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Decode {
                offset: off,
                msg: format!("non-finite element {v} at flat index {i}"),
            });
        }
        data.push(v);
    }
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, write_tensor_bytes(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    read_tensor_bytes(&fs::read(path)?)
}
