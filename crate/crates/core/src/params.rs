//! Named parameter storage, tape binding and the `NCLW1` checkpoint format.
//!
//! Checkpoint layout (all integers little-endian `u32`):
//!
//! ```text
//! "NCLW1"
//! repeated until EOF:
//!   name_len, name bytes (UTF-8), rank, dims[rank], f32 payload[prod(dims)]
//! ```
//!
//! Records are written in lexicographic name order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"NCLW1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over parameters whose name starts with any prefix.
    pub fn count_with_prefix(&self, prefixes: &[&str]) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| has_prefix(n, prefixes))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Copies out the parameters matching `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(n, _)| has_prefix(n, prefixes))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|n, _| !n.starts_with(prefix));
    }

    /// Adds (or replaces) every parameter of `other`.
    pub fn merge(&mut self, other: &ParamStore<T>) {
        for (n, t) in &other.params {
            self.params.insert(n.clone(), t.clone());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and values of matching parameters, as
    /// lowercase hex.
    pub fn checksum(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(n, _)| has_prefix(n, prefixes)) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Uniform `±1/√fan_in` initialization, the one used for every linear and
    /// convolution weight.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(-bound..bound)));
        self.insert(name, t);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape.to_vec(), T::lit(value)));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "missing NCLW1 magic"));
        }
        let mut cur = Cursor { bytes, pos: 5 };
        let mut store = ParamStore::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| Error::format("checkpoint", e.to_string()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let dims = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let payload = cur.take(n * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            let t = Tensor::new(dims, data)
                .map_err(|e| Error::format("checkpoint", format!("record {name}: {e}")))?;
            store.insert(name, t);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("checkpoint", "truncated record"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn has_prefix(name: &str, prefixes: &[&str]) -> bool {
    prefixes.iter().any(|p| name.starts_with(p))
}

/// Parameters of a [`ParamStore`] recorded on one tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
    trainable: Vec<String>,
}

impl Bound {
    /// Records every parameter on `tape`; those whose name starts with one of
    /// `trainable` become differentiable leaves, the rest constants.
    pub fn new<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, trainable: &[&str]) -> Self {
        let mut vars = BTreeMap::new();
        let mut names = Vec::new();
        for (name, t) in store.iter() {
            let v = if has_prefix(name, trainable) {
                names.push(name.clone());
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        Bound {
            vars,
            trainable: names,
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not initialized")))
    }

    pub fn trainable(&self) -> &[String] {
        &self.trainable
    }

    /// Gradients of the trainable parameters keyed by name.
    pub fn grads<T: Real>(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.trainable
            .iter()
            .map(|n| (n.clone(), grads.tensor(self.vars[n])))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            values in proptest::collection::vec(-1e6f32..1e6, 1..40),
            extra in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..10),
        ) {
            let mut store = ParamStore::<f32>::new();
            store.insert("b.weight", Tensor::new([values.len()], values.clone()).unwrap());
            store.insert("a.bias", Tensor::new([1, extra.len()], extra.clone()).unwrap());
            let bytes = store.to_bytes();
            let back = ParamStore::<f32>::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            for (name, t) in store.iter() {
                let u = back.get(name).unwrap();
                prop_assert_eq!(t.shape(), u.shape());
                for (x, y) in t.data().iter().zip(u.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(ParamStore::<f32>::from_bytes(b"NCLW0").is_err());
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::full([2, 2], 1.5));
        let bytes = store.to_bytes();
        assert!(ParamStore::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn layout_matches_documented_format() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::new([2], vec![1.0, -2.0]).unwrap());
        let b = store.to_bytes();
        let mut expect = b"NCLW1".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(b"w");
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        assert_eq!(b, expect);
    }
}
