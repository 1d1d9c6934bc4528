//! Named parameters, the module visitor, and seeded initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by gradient descent when trainable.
    Weight,
    /// Running statistics; updated by the forward pass, never by the optimizer.
    Buffer,
}

/// A named tensor owned by a layer.
///
/// Gradient storage exists only while the parameter is a trainable weight,
/// so frozen parameters never carry any autograd state.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub kind: ParamKind,
    trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad: None,
            kind: ParamKind::Weight,
            trainable: false,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: &[usize], value: Vec<T>) -> Self {
        Self {
            kind: ParamKind::Buffer,
            ..Self::new(name, shape, value)
        }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: T) -> Self {
        Self::new(name, shape, vec![v; shape.iter().product()])
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.trainable = on;
        if on && self.kind == ParamKind::Weight {
            if self.grad.is_none() {
                self.grad = Some(vec![T::zero(); self.value.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything that owns parameters.
pub trait Module<T: Real> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn set_all_trainable(&mut self, on: bool) {
        self.visit_mut(&mut |p| p.set_trainable(on));
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn num_weights(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.kind == ParamKind::Weight {
                n += p.numel()
            }
        });
        n
    }
}

/// Deterministic per-tensor RNG derived from a global seed and the tensor name,
/// so initialization does not depend on construction order.
pub fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub fn normal_init<T: Real>(seed: u64, name: &str, shape: &[usize], std: f64) -> Param<T> {
    let mut rng = tensor_rng(seed, name);
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let value = (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect();
    Param::new(name, shape, value)
}

pub fn uniform_init<T: Real>(seed: u64, name: &str, shape: &[usize], bound: f64) -> Param<T> {
    let mut rng = tensor_rng(seed, name);
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let n = shape.iter().product();
    let value = (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect();
    Param::new(name, shape, value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_hold_no_gradient_buffer() {
        let mut p: Param<f32> = Param::filled("w", &[2, 3], 0.5);
        assert!(p.grad.is_none());
        p.set_trainable(true);
        assert_eq!(p.grad.as_ref().map(Vec::len), Some(6));
        p.set_trainable(false);
        assert!(p.grad.is_none());

        let mut b: Param<f32> = Param::buffer("running_mean", &[3], vec![0.0; 3]);
        b.set_trainable(true);
        assert!(b.trainable());
        assert!(b.grad.is_none());
    }

    #[test]
    fn init_depends_on_name_not_order() {
        let a: Param<f32> = normal_init(7, "a.weight", &[4], 1.0);
        let b: Param<f32> = normal_init(7, "b.weight", &[4], 1.0);
        let a2: Param<f32> = normal_init(7, "a.weight", &[4], 1.0);
        assert_eq!(a.value, a2.value);
        assert_ne!(a.value, b.value);
    }
}
