//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "UMMCKPT\n"
//! version    u32      FORMAT_VERSION
//! n_meta     u32      then n_meta × (key: str, value: str)
//! n_tensors  u32      then n_tensors × tensor
//! str        u32 byte length + UTF-8 bytes
//! tensor     name: str, dtype: u8 (0 = f32, 1 = f64), trainable: u8,
//!            ndim: u32, dims: ndim × u64, values: numel × dtype
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DType, ParameterStore, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"UMMCKPT\n";
pub const FORMAT_VERSION: u32 = 1;

const MAX_NDIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub dtype: DType,
    pub trainable: bool,
    pub shape: Vec<usize>,
    /// Values widened to f64; widening from f32 is exact.
    pub values: Vec<f64>,
}

impl Entry {
    pub fn from_tensor<T: Real>(t: &Tensor<T>, trainable: bool) -> Self {
        Entry {
            dtype: T::DTYPE,
            trainable,
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.values.iter().map(|&v| T::lit(v)).collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_store<T: Real>(store: &ParameterStore<T>) -> Self {
        let mut ck = Checkpoint::new();
        ck.add_store("", store);
        ck
    }

    /// Adds every parameter of `store` under `prefix + name`.
    pub fn add_store<T: Real>(&mut self, prefix: &str, store: &ParameterStore<T>) {
        for (name, p) in store.iter() {
            self.entries
                .insert(format!("{prefix}{name}"), Entry::from_tensor(&p.value, p.trainable));
        }
    }

    pub fn insert<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.insert(name.into(), Entry::from_tensor(t, false));
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .to_tensor()
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    /// Entries containing `/` after stripping belong to nested groups and
    /// are skipped.
    pub fn to_store<T: Real>(&self, prefix: &str) -> Result<ParameterStore<T>> {
        let mut store = ParameterStore::new();
        for (name, e) in &self.entries {
            if let Some(rest) = name.strip_prefix(prefix) {
                if rest.contains('/') {
                    continue;
                }
                store.insert(rest, e.to_tensor()?, e.trainable)?;
            }
        }
        Ok(store)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            put_str(&mut out, name);
            out.push(match e.dtype {
                DType::F32 => 0,
                DType::F64 => 1,
            });
            out.push(e.trainable as u8);
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match e.dtype {
                DType::F32 => e.values.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => e.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let dtype = match r.u8()? {
                0 => DType::F32,
                1 => DType::F64,
                other => return Err(bad(format!("unknown dtype tag {other}"))),
            };
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(bad(format!("bad trainable flag {other}"))),
            };
            let ndim = r.u32()? as usize;
            if ndim == 0 || ndim > MAX_NDIM {
                return Err(bad(format!("tensor `{name}` has {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel = 1usize;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?).map_err(|_| bad("dimension overflow"))?;
                if d == 0 {
                    return Err(bad(format!("tensor `{name}` has a zero dimension")));
                }
                numel = numel.checked_mul(d).ok_or_else(|| bad("element count overflow"))?;
                shape.push(d);
            }
            let width = match dtype {
                DType::F32 => 4,
                DType::F64 => 8,
            };
            let raw = r.take(numel.checked_mul(width).ok_or_else(|| bad("size overflow"))?)?;
            let values: Vec<f64> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint tensor `{name}`")));
            }
            if ck
                .entries
                .insert(name.clone(), Entry { dtype, trainable, shape, values })
                .is_some()
            {
                return Err(bad(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("checkpoint", reason)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8 string"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in prop::collection::vec(-1e30f32..1e30f32, 1..40),
            wide in prop::collection::vec(-1e300f64..1e300f64, 1..10),
            key in "[a-z./]{1,12}",
        ) {
            let mut store = ParameterStore::<f32>::new();
            store.insert("a.w", Tensor::new(vec![vals.len()], vals.clone()).unwrap(), true).unwrap();
            let mut ck = Checkpoint::from_store(&store);
            ck.insert(format!("extra/{key}"), &Tensor::<f64>::new(vec![1, wide.len()], wide.clone()).unwrap());
            ck.meta.insert("phase".into(), key);
            let back = Checkpoint::decode(&ck.encode()).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(back.encode(), ck.encode());
            let restored = back.tensor::<f32>("a.w").unwrap();
            prop_assert!(restored.bit_eq(store.get("a.w").unwrap()));
        }

        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let _ = Checkpoint::decode(&bytes);
        }
    }

    #[test]
    fn rejects_wrong_version_and_truncation() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("x", Tensor::full(&[3], 1.5), false).unwrap();
        let bytes = Checkpoint::from_store(&store).encode();
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(Checkpoint::decode(&wrong).is_err());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut huge = bytes.clone();
        // first dim of tensor `x`: magic 8 + version 4 + n_meta 4 + n_tensors 4
        // + name (4 + 1) + dtype 1 + trainable 1 + ndim 4 = 31
        huge[31..39].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::decode(&huge).is_err());
    }
}
