//! Named parameter collections and their binary file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  "TTPM"          4 bytes
//! version u32            currently 1
//! meta_len u32, meta     UTF-8 JSON describing the owner
//! count u32              number of sections
//! per section:
//!   name_len u16, name   UTF-8
//!   rank u8, dims        rank × u32
//!   data                 product(dims) × f64
//! ```

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"TTPM";
const VERSION: u32 = 1;

/// Ordered, named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.try_get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for (name, t) in &self.entries {
            eat(name.as_bytes());
            for d in t.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn write_to(&self, meta: &str, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.ndim() as u8])?;
            for d in t.shape() {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a parameter file, returning the metadata string and the set.
    pub fn read_from(mut r: impl Read) -> Result<(String, ParamSet)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a TTPM parameter file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported TTPM version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta = String::from_utf8(meta).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let count = read_u32(&mut r)?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("section name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut buf = vec![0u8; numel * 8];
            r.read_exact(&mut buf)?;
            let data = buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            set.insert(name, Tensor::new(shape, data)?);
        }
        Ok((meta, set))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parameters placed on a tape, either as gradient leaves or constants.
pub struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    pub fn new(tape: &mut Tape, params: &ParamSet, trainable: bool) -> Self {
        let vars = params.iter().map(|(n, t)| (n.to_string(), tape.leaf(t.clone(), trainable))).collect();
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Collects the gradient of every bound parameter (zeros when absent).
    pub fn grads(&self, tape: &Tape, params: &ParamSet) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, v) in &self.vars {
            let g = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(params.get(name).shape().to_vec()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// `U(−b, b)` with `b = gain·sqrt(3 / fan_in)`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

/// Normal with the given standard deviation, truncated at two deviations.
pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn binary_round_trip_preserves_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        p.insert("conv.w", fan_in_uniform(&[4, 3, 3, 3], 27, 1.0, &mut rng));
        p.insert("bias", Tensor::new([2], vec![f64::MIN_POSITIVE, -0.0]).unwrap());
        p.insert("scalar", Tensor::scalar(1.5));
        let mut buf = Vec::new();
        p.write_to("{\"kind\":\"test\"}", &mut buf).unwrap();
        let (meta, back) = ParamSet::read_from(buf.as_slice()).unwrap();
        assert_eq!(meta, "{\"kind\":\"test\"}");
        assert_eq!(back.fingerprint(), p.fingerprint());
        assert_eq!(back, p);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::ones([3]));
        let before = p.fingerprint();
        p.get_mut("a").data_mut()[1] = 1.0 + f64::EPSILON;
        assert_ne!(before, p.fingerprint());
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(ParamSet::read_from(&b"TTDS\x01\0\0\0"[..]).is_err());
    }
}
