use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Parameter partition used to route optimizer updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Selector, predictor and the shared prediction head.
    Generator,
    /// Guider encoder and its Gaussian head.
    Guider,
    Discriminator,
    /// Pretrained language model; frozen during main training.
    Lm,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        match name.split('.').next()? {
            "selector" | "predictor" | "head" => Some(ParamGroup::Generator),
            "guider" => Some(ParamGroup::Guider),
            "disc" => Some(ParamGroup::Discriminator),
            "lm" => Some(ParamGroup::Lm),
            _ => None,
        }
    }
}

/// Named trainable arrays, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Moves every entry of `other` into this store.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Entries whose group is `group`.
    pub fn group(&self, group: ParamGroup) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| ParamGroup::of(k) == Some(group))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { tensors }
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { tensors }
    }

    /// Order-sensitive 64-bit FNV-1a digest over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (k, v) in &self.tensors {
            eat(k.as_bytes());
            for d in v.shape() {
                eat(&d.to_le_bytes());
            }
            for x in v.data() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Rounds every value through `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::contract(format!(
                "parameter count mismatch: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(Error::contract(format!(
                    "parameter layout mismatch: {ka}{:?} vs {kb}{:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Adds every gradient of `from` into `into`, inserting missing names.
pub fn accumulate(into: &mut GradMap, from: GradMap) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                into.insert(name, g);
            }
        }
    }
}

/// Multiplies every gradient by `factor`.
pub fn scale_grads(grads: &mut GradMap, factor: f64) {
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= factor);
    }
}

/// Uniform Glorot initialisation for a `[fan_in, fan_out]` matrix.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_by_prefix() {
        assert_eq!(ParamGroup::of("selector.enc.fwd.w"), Some(ParamGroup::Generator));
        assert_eq!(ParamGroup::of("head.w"), Some(ParamGroup::Generator));
        assert_eq!(ParamGroup::of("guider.mu.w"), Some(ParamGroup::Guider));
        assert_eq!(ParamGroup::of("disc.out.b"), Some(ParamGroup::Discriminator));
        assert_eq!(ParamGroup::of("lm.m"), Some(ParamGroup::Lm));
        assert_eq!(ParamGroup::of("other"), None);
    }

    #[test]
    fn checksum_sees_single_bit() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::row(&[1.0, 2.0]));
        let before = s.checksum();
        let v = &mut s.get_mut("a").unwrap().data_mut()[1];
        *v = f64::from_bits(v.to_bits() ^ 1);
        assert_ne!(before, s.checksum());
    }
}
