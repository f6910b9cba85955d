//! Binary checkpoint format.
//!
//! ```text
//! magic    b"LGCKPT\0\0"
//! version  u32 LE
//! count    u32 LE
//! manifest count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, offset u64 }
//! payload  f64 LE, offsets counted in f64 elements from the payload start
//! ```

use std::fs;
use std::path::Path;

use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LGCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += t.len() as u64;
    }
    for (_, _, t) in params.iter() {
        for v in t.values() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?
            .to_string();
        let ndim = r.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        manifest.push((name, dims, offset));
    }
    let payload = &buf[r.pos..];
    let mut params = ParamSet::new();
    for (name, dims, offset) in manifest {
        let n: usize = dims.iter().product();
        let (start, end) = (offset * 8, (offset + n) * 8);
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("payload too short for {name}")));
        }
        let values = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, values)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        params.add(name, t);
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

/// Overwrites `params` from a checkpoint; every name must be present with
/// an identical shape.
pub fn load_into(path: &Path, params: &mut ParamSet) -> Result<()> {
    let loaded = load(path)?;
    restore(&loaded, params)
}

pub fn restore(loaded: &ParamSet, params: &mut ParamSet) -> Result<()> {
    if loaded.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            params.len()
        )));
    }
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.name(id).to_string();
        let src = loaded
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let src = loaded.get(src);
        let dst = params.get_mut(id);
        if src.shape() != dst.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.values_mut().copy_from_slice(src.values());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, -0.0]).unwrap());
        ps.add("b", Tensor::vector(vec![f64::MAX]));
        ps
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ps = sample();
        let back = decode(&encode(&ps)).unwrap();
        assert_eq!(back.len(), 2);
        for ((_, n1, t1), (_, n2, t2)) in ps.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.values().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn header_is_versioned_little_endian() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
    }

    #[test]
    fn restore_rejects_shape_mismatch() {
        let ps = sample();
        let mut other = ParamSet::new();
        other.add("w", Tensor::zeros(vec![3, 2]));
        other.add("b", Tensor::zeros(vec![1]));
        let err = restore(&ps, &mut other).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
    }

    #[test]
    fn truncated_and_foreign_files_rejected() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 4]).is_err());
        assert!(decode(b"not a checkpoint").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(decode(&wrong_version).is_err());
    }
}
