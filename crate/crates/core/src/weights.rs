//! `SIML` tensor container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    4 bytes  "SIML"
//! version  u32      1
//! count    u32      number of records
//! record*  name_len u32, name UTF-8, rank u32, dims u32 x rank, data f32 x prod(dims)
//! ```
//!
//! Records are written in ascending name order. Decoding parses the whole
//! buffer before returning anything, so a truncated file yields an error and
//! no tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"SIML";
pub const VERSION: u32 = 1;

/// Named tensors in deterministic (sorted) order.
pub type TensorMap = BTreeMap<String, Tensor<f32>>;

pub fn encode(records: &TensorMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::format(
                    field,
                    format!("truncated at byte {} (need {n} more)", self.pos),
                )
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(buf: &[u8]) -> Result<TensorMap> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "expected \"SIML\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let count = r.u32("count")?;
    let mut out = TensorMap::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format("name", format!("record {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u32("dims")? as usize;
            if d == 0 {
                return Err(Error::format(name, "zero-sized dimension"));
            }
            dims.push(d);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(name.clone(), "dimension product overflows"))?;
        let bytes = r.take(numel * 4, &format!("data of {name}"))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(&dims, data)?;
        if out.insert(name.clone(), tensor).is_some() {
            return Err(Error::format(name, "duplicate record"));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::format(
            "trailer",
            format!("{} unexpected trailing bytes", buf.len() - r.pos),
        ));
    }
    Ok(out)
}

/// Writes through a sibling temp file and renames, so readers never see a
/// half-written container.
pub fn write_file(path: impl AsRef<Path>, records: &TensorMap) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("siml.tmp");
    fs::write(&tmp, encode(records))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<TensorMap> {
    decode(&fs::read(path)?)
}

/// Removes `name` from `map` and checks its shape.
pub(crate) fn take_shaped(map: &mut TensorMap, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::format(name, "missing record"))?;
    if t.shape() != shape {
        return Err(Error::format(
            name,
            format!("shape {:?} does not match expected {:?}", t.shape(), shape),
        ));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorMap {
        let mut m = TensorMap::new();
        m.insert(
            "b".into(),
            Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap(),
        );
        m.insert("a".into(), Tensor::scalar(7.25));
        m
    }

    #[test]
    fn round_trip_bit_exact() {
        let m = sample();
        let back = decode(&encode(&m)).unwrap();
        assert_eq!(back.len(), 2);
        for (k, v) in &m {
            assert!(back[k].bit_eq(v));
        }
    }

    #[test]
    fn records_sorted_by_name() {
        let bytes = encode(&sample());
        let first_name = &bytes[16..17];
        assert_eq!(first_name, b"a");
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = encode(&sample());
        for cut in 0..bytes.len() {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(decode(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = encode(&sample());
        bytes[4] = 2;
        assert!(decode(&bytes).unwrap_err().to_string().contains("version"));
    }
}
