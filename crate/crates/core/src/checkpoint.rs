//! Binary checkpoints.
//!
//! Layout: magic `"STDN"`, `u32` format version, `u32` byte length of the
//! model config as compact JSON followed by that JSON, then every parameter
//! tensor until end of file as `u32` name length, UTF-8 name, `u32` rank,
//! `rank` × `u32` dims, and the elements as little-endian `f32`. All
//! integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"STDN";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| crate::error::invalid!("{v} does not fit in u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(cfg: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(cfg)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * params.total_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    for (name, t) in params.named_tensors() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: format!("{} (at byte {})", reason.into(), self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.fail(format!("truncated: wanted {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.fail("missing STDN magic"));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let cfg: ModelConfig = serde_json::from_slice(r.take(n)?)?;
    let mut params = ModelParams::zeros(&cfg)?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut seen = vec![false; names.len()];
    {
        let mut slots = params.tensors_mut();
        while !r.done() {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| r.fail("tensor name is not UTF-8"))?.to_string();
            let idx = names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| r.fail(format!("unexpected tensor {name}")))?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(r.fail(format!("tensor {name} appears twice")));
            }
            let rank = r.u32()?;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            if dims != slots[idx].shape() {
                return Err(r.fail(format!("tensor {name} has shape {dims:?}, config implies {:?}", slots[idx].shape())));
            }
            let raw = r.take(4 * slots[idx].len())?;
            for (dst, c) in slots[idx].data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(r.fail(format!("missing tensor {}", names[i])));
    }
    Ok((cfg, params))
}

pub fn save(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    fs::write(path, encode(cfg, params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ModelConfig, ModelParams) {
        let mut cfg = ModelConfig::tiny();
        cfg.dstb_count = 1;
        let p = ModelParams::init(&cfg).unwrap();
        (cfg, p)
    }

    #[test]
    fn round_trip_is_lossless_at_f32() {
        let (cfg, p) = tiny();
        let bytes = encode(&cfg, &p).unwrap();
        let (cfg2, p2) = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(cfg, cfg2);
        for ((_, a), (_, b)) in p.named_tensors().iter().zip(p2.named_tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
            }
        }
        assert_eq!(encode(&cfg2, &p2).unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let (cfg, p) = tiny();
        let bytes = encode(&cfg, &p).unwrap();
        let at = Path::new("mem");
        assert_eq!(decode(&bytes[..bytes.len() - 1], at).unwrap_err().code(), "bad-format");
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong, at).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(decode(&v2, at).is_err());
        // Header only: every tensor is missing.
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let err = decode(&bytes[..12 + json_len], at).unwrap_err();
        assert!(err.to_string().contains("missing tensor"), "{err}");
    }
}
