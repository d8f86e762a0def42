use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

/// Named learnable arrays. Iteration is lexicographic by name, which fixes
/// the traversal order of the optimizer and of checkpoint files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    seed: u64,
}

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// N(0, INIT_STD^2) truncated at two standard deviations.
    TruncNormal,
}

/// Per-parameter RNG derived from the store seed and the parameter name,
/// so init is independent of registration order.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name '{name}'")));
        }
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad: None,
                requires_grad: true,
            },
        );
        Ok(())
    }

    /// Registers a parameter and fills it according to `init`.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::TruncNormal => {
                let mut rng = param_rng(self.seed, name);
                let normal = Normal::new(0.0, INIT_STD).expect("valid std");
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * INIT_STD {
                            break v;
                        }
                    })
                    .collect();
                Tensor::new(shape, data)?
            }
        };
        self.insert(name, t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Removes every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn set_requires_grad(&mut self, prefix: &str, flag: bool) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                p.requires_grad = flag;
            }
        }
    }

    /// Adds `scale * grad` into each named accumulator.
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Tensor>, scale: f64) -> Result<()> {
        for (name, g) in grads {
            let p = self.params.get_mut(name).ok_or_else(|| {
                Error::Invariant(format!("gradient for unknown parameter '{name}'"))
            })?;
            if g.shape() != p.value.shape() {
                return Err(Error::Invariant(format!(
                    "gradient shape {:?} does not match parameter '{name}' {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
            let acc = p.grad.get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += scale * v;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// SHA-256 over names, shapes and raw values, as lowercase hex.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_normal_respects_bounds_and_is_order_independent() {
        let mut a = ParamStore::new(3);
        a.init("x.weight", &[10, 20], Init::TruncNormal).unwrap();
        a.init("y.weight", &[4, 4], Init::TruncNormal).unwrap();
        let mut b = ParamStore::new(3);
        b.init("y.weight", &[4, 4], Init::TruncNormal).unwrap();
        b.init("x.weight", &[10, 20], Init::TruncNormal).unwrap();
        assert_eq!(a, b);
        assert!(a
            .get("x.weight")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= 2.0 * INIT_STD));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new(0);
        s.init("a", &[1], Init::Zeros).unwrap();
        assert!(s.init("a", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn iteration_is_lexicographic() {
        let mut s = ParamStore::new(0);
        for n in ["b.w", "a.z", "a.b"] {
            s.init(n, &[1], Init::Zeros).unwrap();
        }
        let names: Vec<_> = s.names().collect();
        assert_eq!(names, ["a.b", "a.z", "b.w"]);
    }
}
