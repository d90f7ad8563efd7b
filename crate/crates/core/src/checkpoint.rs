//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CAMCLS\0\x01"                      magic + format version
//! u32 len, [u8; len]                  model config as JSON
//! u32 count                           number of parameter tensors
//! per tensor, in declaration order:
//!   u32 name_len, [u8; name_len]      UTF-8 name
//!   u32 rank, [u64; rank]             dims
//!   [f64; product(dims)]              payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Param};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CAMCLS\0\x01";

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        params.push(Param { name, value });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Model::from_params(config, params)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::build(ModelConfig::new(32, 4, 8, 11)).unwrap();
        let bytes = to_bytes(&model);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let model = Model::build(ModelConfig::new(16, 4, 4, 1)).unwrap();
        let bytes = to_bytes(&model);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes(&long).is_err());
    }
}
