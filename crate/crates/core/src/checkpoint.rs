//! Versioned binary checkpoints, little-endian throughout.
//!
//! Layout: magic `NPCK`, version u16, step u64, config hash (32 bytes),
//! then a parameter record block and an optimizer record block. Each block is
//! a u32 record count followed by records of the form: name length (u16),
//! UTF-8 name, frozen flag (u8), rank (u8), one u32 per dimension, then the
//! f64 values. Optimizer records reuse the format under `adam.m.<name>` /
//! `adam.v.<name>`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NPCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: [u8; 32],
    pub params: ParamStore,
    /// Optimizer moments as named records (`adam.m.*`, `adam.v.*`).
    pub moments: ParamStore,
}

fn encode_record(out: &mut Vec<u8>, name: &str, frozen: bool, shape: &[usize], values: &[f64]) {
    let name_bytes = name.as_bytes();
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(name_bytes);
    out.push(frozen as u8);
    out.push(shape.len() as u8);
    for d in shape {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialized parameter records (no header), usable for hashing subsets.
pub fn encode_param_block(store: &ParamStore, prefix: Option<&str>) -> Vec<u8> {
    let mut out = Vec::new();
    for p in store.iter() {
        if prefix.map_or(true, |pre| p.name.starts_with(pre)) {
            encode_record(&mut out, &p.name, p.frozen, &p.shape, &p.data);
        }
    }
    out
}

/// SHA-256 over the names, shapes and values of all parameters with the
/// prefix. The freeze flag is excluded so freezing alone does not change a
/// parameter's hash.
pub fn hash_params(store: &ParamStore, prefix: Option<&str>) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for p in store.iter() {
        if prefix.map_or(true, |pre| p.name.starts_with(pre)) {
            hasher.update((p.name.len() as u16).to_le_bytes());
            hasher.update(p.name.as_bytes());
            hasher.update([p.shape.len() as u8]);
            for d in &p.shape {
                hasher.update((*d as u32).to_le_bytes());
            }
            for v in &p.data {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

pub fn hash_params_hex(store: &ParamStore, prefix: Option<&str>) -> String {
    hash_params(store, prefix).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(
    path: &Path,
    params: &ParamStore,
    moments: &ParamStore,
    step: u64,
    config_hash: [u8; 32],
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&config_hash);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    out.extend_from_slice(&encode_param_block(params, None));
    out.extend_from_slice(&(moments.len() as u32).to_le_bytes());
    out.extend_from_slice(&encode_param_block(moments, None));
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn record(&mut self) -> Result<(String, bool, Vec<usize>, Vec<f64>)> {
        let name_len = self.u16()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|e| Error::Data(format!("checkpoint record name not UTF-8: {e}")))?;
        let frozen = self.take(1)?[0] != 0;
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            let b = self.take(8)?;
            values.push(f64::from_le_bytes(b.try_into().expect("8 bytes")));
        }
        Ok((name, frozen, shape, values))
    }

    fn block(&mut self) -> Result<ParamStore> {
        let count = self.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let (name, frozen, shape, values) = self.record()?;
            store.register(&name, shape, values)?;
            store.get_mut(&name)?.frozen = frozen;
        }
        Ok(store)
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Data("bad checkpoint magic, expected NPCK".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let step = r.u64()?;
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(r.take(32)?);
    let params = r.block()?;
    let moments = r.block()?;
    if r.pos != bytes.len() {
        return Err(Error::Data(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { step, config_hash, params, moments })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register("a.w", vec![2, 3], vec![1.5, -0.25, 3.0, 0.0, 2.5e-17, -1.0]).unwrap();
        s.register("ner.w", vec![2], vec![0.5, 0.75]).unwrap();
        s.freeze_prefix("ner.");
        s
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = store();
        let mut moments = ParamStore::new();
        moments.register("adam.m.a.w", vec![2, 3], vec![0.1; 6]).unwrap();
        moments.register("adam.v.a.w", vec![2, 3], vec![0.2; 6]).unwrap();
        save(&path, &params, &moments, 42, [7u8; 32]).unwrap();

        let ck = load(&path).unwrap();
        assert_eq!(ck.step, 42);
        assert_eq!(ck.config_hash, [7u8; 32]);
        assert_eq!(ck.params.len(), 2);
        let a = ck.params.get("a.w").unwrap();
        assert_eq!(a.shape, vec![2, 3]);
        assert_eq!(a.data, params.get("a.w").unwrap().data);
        assert!(!a.frozen);
        assert!(ck.params.get("ner.w").unwrap().frozen);
        assert_eq!(ck.moments.get("adam.m.a.w").unwrap().data, vec![0.1; 6]);
    }

    #[test]
    fn hash_changes_with_values_and_respects_prefix() {
        let a = store();
        let mut b = store();
        assert_eq!(hash_params(&a, None), hash_params(&b, None));
        b.get_mut("a.w").unwrap().data[0] += 1e-12;
        assert_ne!(hash_params(&a, None), hash_params(&b, None));
        // teacher-only hash ignores the student change
        assert_eq!(hash_params(&a, Some("ner.")), hash_params(&b, Some("ner.")));
    }

    #[test]
    fn load_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &store(), &ParamStore::new(), 1, [0u8; 32]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load(&path).is_err());
    }
}
