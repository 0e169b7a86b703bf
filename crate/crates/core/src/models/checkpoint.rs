//! Versioned binary container for named parameter tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SCKP"  u32 version
//! u32 len, kind (UTF-8)
//! u64 len, config (UTF-8 JSON)
//! u32 count
//! count × { u32 len, name (UTF-8); u32 rank; rank × u64 dim; numel × f64 }
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::fs;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SCKP";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the parameters belong to, e.g. `"encoder"` or `"segmenter"`.
    pub kind: String,
    /// Serialized model configuration.
    pub config: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Captures every parameter whose name starts with one of `prefixes`
    /// (all parameters when `prefixes` is empty).
    pub fn from_store(kind: &str, config: String, store: &ParamStore, prefixes: &[&str]) -> Self {
        let params = store
            .iter()
            .filter(|(_, p)| prefixes.is_empty() || prefixes.iter().any(|pre| p.name().starts_with(pre)))
            .map(|(_, p)| (p.name().to_string(), p.value().clone()))
            .collect();
        Self {
            kind: kind.to_string(),
            config,
            params,
        }
    }

    /// Copies the stored tensors into same-named parameters of `store`.
    /// Every checkpoint entry must exist in the store with equal shape.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<usize> {
        for (name, value) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Format(format!("checkpoint parameter {name} not in model")))?;
            store.set_value(id, value.clone())?;
        }
        Ok(self.params.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str32(&mut out, &self.kind);
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str32(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind_len = r.u32()? as usize;
        let kind = r.str(kind_len)?;
        let config_len = r.u64()? as usize;
        let config = r.str(config_len)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.str(name_len)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| r.u64().map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { kind, config, params })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn put_str32(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in prop::collection::vec(prop::num::f64::ANY, 0..40),
            name in "[a-z.]{1,12}",
        ) {
            let n = values.len();
            let ck = Checkpoint {
                kind: "encoder".into(),
                config: "{\"x\":1}".into(),
                params: vec![(name, Tensor::new([n], values.clone()).unwrap())],
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(back.params[0].1.data()), bits(&values));
            prop_assert_eq!(&back.kind, &ck.kind);
            prop_assert_eq!(&back.config, &ck.config);
        }
    }

    #[test]
    fn rejects_corrupt_input() {
        let ck = Checkpoint {
            kind: "k".into(),
            config: String::new(),
            params: vec![("w".into(), Tensor::zeros([2, 2]))],
        };
        let bytes = ck.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(Error::Format(_))));
        let mut newer = bytes.clone();
        newer[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&newer), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip_and_load_into_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::new();
        let a = store.add("encoder.a", Tensor::full([3], 0.1 + 0.2)).unwrap();
        store.add("decoder.b", Tensor::full([2], 7.0)).unwrap();
        let ck = Checkpoint::from_store("encoder", "{}".into(), &store, &["encoder."]);
        assert_eq!(ck.params.len(), 1);
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);

        let mut fresh = ParamStore::new();
        let fa = fresh.add("encoder.a", Tensor::zeros([3])).unwrap();
        assert_eq!(back.load_into(&mut fresh).unwrap(), 1);
        assert_eq!(fresh.value(fa).data(), store.value(a).data());
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
