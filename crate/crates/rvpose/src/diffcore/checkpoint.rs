//! Parameter checkpoint container.
//!
//! A single file per model: magic "CHKP", version u16, entry count u32, then
//! per entry a name (u16 length + UTF-8), dtype u8 (0=f32, 1=f64), ndim u8,
//! dims as u32 LE and the raw little-endian data. Round trips are bit-exact.

use super::graph::ParamRef;
use super::tensor::{Dtype, Element, Tensor};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"CHKP";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (expected CHKP)")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("corrupt entry: {0}")]
    Corrupt(String),
    #[error("dtype mismatch for {name}: file has {file:?}, model wants {model:?}")]
    DtypeMismatch {
        name: String,
        file: Dtype,
        model: Dtype,
    },
    #[error("shape mismatch for {name}: file has {file:?}, model wants {model:?}")]
    ShapeMismatch {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },
    #[error("missing entry {0}")]
    Missing(String),
}

/// One serialized tensor, dtype-erased.
#[derive(Clone, Debug)]
pub struct Entry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub raw: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<E: Element>(t: &Tensor<E>) -> Entry {
        let mut raw = Vec::with_capacity(t.numel() * E::BYTES);
        for &v in t.data() {
            v.write_le(&mut raw);
        }
        Entry {
            dtype: E::DTYPE,
            shape: t.shape().to_vec(),
            raw,
        }
    }

    pub fn to_tensor<E: Element>(&self, name: &str) -> Result<Tensor<E>, CheckpointError> {
        if self.dtype != E::DTYPE {
            return Err(CheckpointError::DtypeMismatch {
                name: name.to_string(),
                file: self.dtype,
                model: E::DTYPE,
            });
        }
        let n: usize = self.shape.iter().product();
        if self.raw.len() != n * E::BYTES {
            return Err(CheckpointError::Corrupt(format!(
                "entry {name}: {} bytes for {n} values",
                self.raw.len()
            )));
        }
        let data: Vec<E> = self.raw.chunks_exact(E::BYTES).map(E::read_le).collect();
        Tensor::new(self.shape.clone(), data)
            .map_err(|e| CheckpointError::Corrupt(format!("entry {name}: {e}")))
    }
}

/// Named tensors, ordered by name for deterministic bytes.
#[derive(Default)]
pub struct Checkpoint {
    entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<E: Element>(&mut self, name: impl Into<String>, t: &Tensor<E>) {
        self.entries.insert(name.into(), Entry::from_tensor(t));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, e) in &self.entries {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[e.dtype as u8])?;
            w.write_all(&[e.shape.len() as u8])?;
            for &d in &e.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&e.raw)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut u16b = [0u8; 2];
        r.read_exact(&mut u16b)?;
        let version = u16::from_le_bytes(u16b);
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let count = u32::from_le_bytes(u32b);
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            r.read_exact(&mut u16b)?;
            let name_len = u16::from_le_bytes(u16b) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| CheckpointError::Corrupt(format!("name utf8: {e}")))?;
            let mut b1 = [0u8; 1];
            r.read_exact(&mut b1)?;
            let dtype = Dtype::from_tag(b1[0])
                .ok_or_else(|| CheckpointError::Corrupt(format!("dtype tag {}", b1[0])))?;
            r.read_exact(&mut b1)?;
            let ndim = b1[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                r.read_exact(&mut u32b)?;
                shape.push(u32::from_le_bytes(u32b) as usize);
            }
            let n: usize = shape.iter().product();
            let bytes = n * match dtype {
                Dtype::F32 => 4,
                Dtype::F64 => 8,
            };
            let mut raw = vec![0u8; bytes];
            r.read_exact(&mut raw)?;
            entries.insert(name, Entry { dtype, shape, raw });
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&bytes[..])
    }
}

/// Parameters plus non-trainable buffers (e.g. batch-norm running stats) of
/// one model, in registration order.
pub struct ParamStore<E: Element> {
    params: Vec<ParamRef<E>>,
    buffers: Vec<(String, std::rc::Rc<std::cell::RefCell<Tensor<E>>>)>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn register(&mut self, p: ParamRef<E>) -> ParamRef<E> {
        self.params.push(std::rc::Rc::clone(&p));
        p
    }

    pub fn register_buffer(
        &mut self,
        name: impl Into<String>,
        t: Tensor<E>,
    ) -> std::rc::Rc<std::cell::RefCell<Tensor<E>>> {
        let cell = std::rc::Rc::new(std::cell::RefCell::new(t));
        self.buffers.push((name.into(), std::rc::Rc::clone(&cell)));
        cell
    }

    pub fn params(&self) -> &[ParamRef<E>] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value().numel()).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for p in &self.params {
            ck.insert(p.name(), &p.value());
        }
        for (name, b) in &self.buffers {
            ck.insert(name.clone(), &b.borrow());
        }
        ck
    }

    /// Strict load: every registered tensor must be present with matching
    /// shape and dtype.
    pub fn load_checkpoint(&self, ck: &Checkpoint) -> Result<(), CheckpointError> {
        for p in &self.params {
            let e = ck
                .get(p.name())
                .ok_or_else(|| CheckpointError::Missing(p.name().to_string()))?;
            if e.shape != p.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name().to_string(),
                    file: e.shape.clone(),
                    model: p.shape(),
                });
            }
            self.apply_entry(p.name(), e, |t| p.set_value(t))?;
        }
        for (name, b) in &self.buffers {
            let e = ck
                .get(name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if e.shape != b.borrow().shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    file: e.shape.clone(),
                    model: b.borrow().shape().to_vec(),
                });
            }
            self.apply_entry(name, e, |t| *b.borrow_mut() = t)?;
        }
        Ok(())
    }

    /// Loads the entries whose names intersect this store AND match in
    /// shape (used when moving trunk weights between training stages and
    /// between the recurrent and cnn-only variants, whose same-named heads
    /// legitimately differ in shape). Returns how many tensors were loaded.
    pub fn load_matching(&self, ck: &Checkpoint) -> Result<usize, CheckpointError> {
        let mut loaded = 0usize;
        for p in &self.params {
            if let Some(e) = ck.get(p.name()) {
                if e.shape != p.shape() {
                    continue;
                }
                self.apply_entry(p.name(), e, |t| p.set_value(t))?;
                loaded += 1;
            }
        }
        for (name, b) in &self.buffers {
            if let Some(e) = ck.get(name) {
                if e.shape != b.borrow().shape() {
                    continue;
                }
                self.apply_entry(name, e, |t| *b.borrow_mut() = t)?;
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    fn apply_entry(
        &self,
        name: &str,
        e: &Entry,
        set: impl FnOnce(Tensor<E>),
    ) -> Result<(), CheckpointError> {
        let t: Tensor<E> = e.to_tensor(name)?;
        set(t);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::graph::Param;
    use crate::diffcore::rng::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = Rng::seed_from(11);
        let mut ck = Checkpoint::new();
        let a = Tensor::<f32>::randn(&[3, 5], 0.7, &mut rng);
        let b = Tensor::<f64>::randn(&[7], 1.3, &mut rng);
        ck.insert("net.a", &a);
        ck.insert("net.b", &b);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&bytes[..]).unwrap();
        let a2: Tensor<f32> = back.get("net.a").unwrap().to_tensor("net.a").unwrap();
        let b2: Tensor<f64> = back.get("net.b").unwrap().to_tensor("net.b").unwrap();
        assert_eq!(a.data(), a2.data());
        assert_eq!(b.data(), b2.data());
        // serialized bytes are identical when rewritten
        let mut bytes2 = Vec::new();
        back.write_to(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn bad_magic_and_dtype_rejected() {
        assert!(matches!(
            Checkpoint::read_from(&b"NOPE\x01\x00\x00\x00\x00\x00"[..]),
            Err(CheckpointError::BadMagic)
        ));
        let mut ck = Checkpoint::new();
        ck.insert("x", &Tensor::<f32>::zeros(&[2]));
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&bytes[..]).unwrap();
        assert!(back.get("x").unwrap().to_tensor::<f64>("x").is_err());
    }

    #[test]
    fn store_load_matching_skips_unknown() {
        let mut store = ParamStore::<f32>::new();
        let p = store.register(Param::new("w", Tensor::full(&[2], 1.0)));
        let mut ck = Checkpoint::new();
        ck.insert("w", &Tensor::<f32>::full(&[2], 5.0));
        ck.insert("other", &Tensor::<f32>::zeros(&[3]));
        assert_eq!(store.load_matching(&ck).unwrap(), 1);
        assert_eq!(p.value().data(), &[5.0, 5.0]);
        // strict load fails when an entry is missing
        let empty = Checkpoint::new();
        assert!(store.load_checkpoint(&empty).is_err());
    }
}
