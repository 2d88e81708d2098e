//! `.ckpt` files: `"FCPT"` | u32 version | u32 length + canonical JSON
//! config | u64 parameter count | per parameter: u32 name length + UTF-8
//! name, u32 rank, u32 extents, f32 values. All integers little-endian.

use std::path::Path;

use super::{Model, ModelConfig, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCPT";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::BadCheckpoint(msg.into())
}

/// JSON with keys sorted, so equal configs always serialize identically.
fn canonical_json(cfg: &ModelConfig) -> String {
    let v = serde_json::to_value(cfg).expect("config serializes");
    serde_json::to_string(&v).expect("value serializes")
}

pub fn save_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = canonical_json(&model.config);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for (_, p) in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint and checks that every tensor matches the layout its
/// config implies.
pub fn load_checkpoint(bytes: &[u8]) -> Result<Model, ModelError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("missing FCPT magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = c.u32()? as usize;
    let json = std::str::from_utf8(c.take(len)?).map_err(|_| bad("config is not UTF-8"))?;
    let config: ModelConfig = serde_json::from_str(json).map_err(|e| bad(format!("config: {e}")))?;
    let mut model = Model::new(config, 0)?;
    let count = c.u64()?;
    if count != model.params.len() as u64 {
        return Err(ModelError::IncompatibleCheckpoint(format!(
            "{count} tensors stored, config implies {}",
            model.params.len()
        )));
    }
    for p in model.params.iter_mut() {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?).map_err(|_| bad("name is not UTF-8"))?;
        if name != p.name {
            return Err(ModelError::IncompatibleCheckpoint(format!("expected {}, found {name}", p.name)));
        }
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
        if shape != p.value.shape() {
            return Err(ModelError::IncompatibleCheckpoint(format!(
                "{name}: stored shape {shape:?}, expected {:?}",
                p.value.shape()
            )));
        }
        let raw = c.take(4 * p.value.numel())?;
        for (dst, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(bad(format!("{name} holds a non-finite value")));
            }
            *dst = v as f64;
        }
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(model)
}

pub fn write_checkpoint_file(path: impl AsRef<Path>, model: &Model) -> Result<(), ModelError> {
    std::fs::write(path, save_checkpoint(model))?;
    Ok(())
}

pub fn read_checkpoint_file(path: impl AsRef<Path>) -> Result<Model, ModelError> {
    load_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let m = Model::new(ModelConfig::desk(4), 11).unwrap();
        let bytes = save_checkpoint(&m);
        let back = load_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(save_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = Model::new(ModelConfig::desk(2), 1).unwrap();
        let bytes = save_checkpoint(&m);
        assert!(matches!(load_checkpoint(&bytes[..bytes.len() - 1]), Err(ModelError::BadCheckpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(load_checkpoint(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(load_checkpoint(&magic).is_err());
    }

    #[test]
    fn config_keys_are_sorted() {
        let json = canonical_json(&ModelConfig::desk(2));
        let keys: Vec<&str> = json.split('"').skip(1).step_by(2).filter(|k| k.chars().all(|c| c == '_' || c.is_ascii_lowercase())).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}
