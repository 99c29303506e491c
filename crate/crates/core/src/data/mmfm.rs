//! MMFM feature-map files: `"MMFM"`, version u16, count u32, then per map
//! `G` u32, `C` u32 and `G·C` binary32 values, all little-endian.

use std::path::Path;

use super::write_atomic;
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const MMFM_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"MMFM";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(Error::Truncated("feature map file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses an in-memory MMFM image; nothing is returned unless the whole
/// buffer is well formed.
pub fn parse_feature_maps(bytes: &[u8]) -> Result<Vec<Tensor>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic("feature map file"));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != MMFM_VERSION {
        return Err(Error::Version {
            what: "feature map",
            found: version,
        });
    }
    let n = r.u32()? as usize;
    let mut maps = Vec::new();
    for _ in 0..n {
        let g = r.u32()? as usize;
        let c = r.u32()? as usize;
        let count = g.checked_mul(c).ok_or(Error::DimensionOverflow("feature map"))?;
        let len = count.checked_mul(4).ok_or(Error::DimensionOverflow("feature map"))?;
        if g == 0 || c == 0 {
            return Err(Error::Corrupt {
                what: "feature map",
                detail: format!("zero extent {g}×{c}"),
            });
        }
        let raw = r.take(len)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        maps.push(Tensor::new(vec![g, c], data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt {
            what: "feature map",
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(maps)
}

pub fn load_feature_maps(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_feature_maps(&bytes)
}

/// Encodes rank-2 maps; values are narrowed to binary32.
pub fn serialize_feature_maps(maps: &[Tensor]) -> Result<Vec<u8>> {
    let count = u32::try_from(maps.len()).map_err(|_| Error::DimensionOverflow("feature map count"))?;
    let mut out = Vec::with_capacity(10 + maps.iter().map(|m| 8 + 4 * m.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MMFM_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for m in maps {
        if m.rank() != 2 {
            return Err(Error::shape(format!("feature map must be rank 2, got {:?}", m.shape())));
        }
        for extent in [m.rows(), m.cols()] {
            let e = u32::try_from(extent).map_err(|_| Error::DimensionOverflow("feature map"))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for &v in m.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_feature_maps(path: &Path, maps: &[Tensor]) -> Result<()> {
    write_atomic(path, &serialize_feature_maps(maps)?)
}
