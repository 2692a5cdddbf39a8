//! Single-file checkpoint: a JSON manifest followed by every parameter
//! tensor as little-endian `f64`.
//!
//! ```text
//! "SCNCKPT1" | u64 manifest_len | manifest JSON | u64 n_tensors |
//!   per tensor: u64 name_len | name | u64 ndim | u64 dims... | f64 data...
//! ```

use std::path::Path;

use serde_json::Value;

use super::{NnError, Params, Tensor};

const MAGIC: &[u8; 8] = b"SCNCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata: dimensions, vocabulary, seed.
    pub manifest: Value,
    pub params: Params,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let manifest = serde_json::to_vec(&self.manifest).expect("json value serializes");
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, tensor) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape.len() as u64).to_le_bytes());
            for &d in &tensor.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &tensor.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let len = r.u64()? as usize;
        let manifest = serde_json::from_slice(r.take(len)?)
            .map_err(|e| NnError::Checkpoint(format!("manifest: {e}")))?;
        let count = r.u64()?;
        let mut params = Params::default();
        for _ in 0..count {
            let len = r.u64()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| NnError::Checkpoint("tensor name is not utf-8".into()))?;
            let ndim = r.u64()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| NnError::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(name, Tensor { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { manifest, params })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), NnError> {
    std::fs::write(path, checkpoint.to_bytes())
        .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let bytes = std::fs::read(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut params = Params::default();
        params.insert("a.w", Tensor { shape: vec![2, 2], data: vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300] });
        params.insert("b", Tensor { shape: vec![1], data: vec![std::f64::consts::PI] });
        Checkpoint { manifest: json!({"seed": 3, "vocab": ["red", "box"]}), params }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.to_bytes(), ckpt.to_bytes());
        assert_eq!(back.params.get("a.w")[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncation_is_an_error() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTCKPT").is_err());
    }
}
