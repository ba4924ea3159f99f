//! Parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DKCK"  u32 version (=1)  u64 entry_count
//! per entry: u32 name_len, name (UTF-8), u64 rows, u64 cols, rows*cols f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::matrix::Tensor2;
use super::params::ParamStore;
use crate::error::DiffError;

const MAGIC: &[u8; 4] = b"DKCK";
const VERSION: u32 = 1;

/// A named parameter list, detached from any store.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor2)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Self::from_stores(&[("", store)])
    }

    /// Merges several stores, prefixing each slot name with `prefix` (when non-empty) and a dot.
    pub fn from_stores(stores: &[(&str, &ParamStore)]) -> Self {
        let mut entries = Vec::new();
        for (prefix, store) in stores {
            for (name, value) in store.entries() {
                let full = if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") };
                entries.push((full, value.clone()));
            }
        }
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every `{prefix}.{slot}` entry into the matching slot of `store`.
    /// Fails if a slot is missing or mis-shaped.
    pub fn restore_into(&self, prefix: &str, store: &mut ParamStore) -> Result<(), DiffError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let full = if prefix.is_empty() { name.clone() } else { format!("{prefix}.{name}") };
            let value = self.get(&full).ok_or_else(|| DiffError::Checkpoint(format!("missing parameter {full}")))?;
            if value.shape() != store.value(id).shape() {
                return Err(DiffError::Checkpoint(format!(
                    "{full}: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    store.value(id).shape()
                )));
            }
            store.set_value(id, value.clone());
        }
        Ok(())
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, DiffError> {
        let bad = |m: &str| DiffError::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut bytes)?;
        if version != VERSION {
            return Err(DiffError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u64(&mut bytes)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = read_u32(&mut bytes)? as usize;
            if bytes.len() < len {
                return Err(bad("truncated name"));
            }
            let name = std::str::from_utf8(&bytes[..len]).map_err(|_| bad("name is not UTF-8"))?.to_string();
            bytes = &bytes[len..];
            let rows = read_u64(&mut bytes)? as usize;
            let cols = read_u64(&mut bytes)? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| bad("shape overflow"))?;
            if bytes.len() < n * 8 {
                return Err(bad("truncated values"));
            }
            let data = bytes[..n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            bytes = &bytes[n * 8..];
            entries.push((name, Tensor2::from_vec(rows, cols, data)));
        }
        if !bytes.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, crate::error::Error> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

fn read_u32(b: &mut &[u8]) -> Result<u32, DiffError> {
    let mut buf = [0u8; 4];
    b.read_exact(&mut buf).map_err(|_| DiffError::Checkpoint("truncated".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(b: &mut &[u8]) -> Result<u64, DiffError> {
    let mut buf = [0u8; 8];
    b.read_exact(&mut buf).map_err(|_| DiffError::Checkpoint("truncated".into()))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_and_restore() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor2::from_vec(2, 2, vec![1.0, -2.5, f64::MIN_POSITIVE, 3.0]));
        store.add("bias", Tensor2::zeros(1, 3));
        let ck = Checkpoint::from_store(&store);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);

        let mut other = store.clone();
        other.set_value(a, Tensor2::zeros(2, 2));
        back.restore_into("", &mut other).unwrap();
        assert_eq!(other.value(a), store.value(a));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::from_bytes(b"XXXX\x01\0\0\0").is_err());
        let mut store = ParamStore::new();
        store.add("w", Tensor2::zeros(2, 2));
        let bytes = Checkpoint::from_store(&store).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
