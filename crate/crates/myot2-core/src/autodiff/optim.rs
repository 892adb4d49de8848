//! Named parameter storage, Adam, and weight initialization.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct Param {
    value: Tensor,
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Named parameters with per-parameter Adam state (first/second moment and
/// step count). Keys iterate in name order, which keeps every downstream
/// artifact (checkpoints, update order) independent of insertion order.
/// Reads take `&self` and may be shared across threads; updates require
/// exclusive access.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let (m, v) = (Tensor::zeros(value.shape().to_vec()), Tensor::zeros(value.shape().to_vec()));
        self.params.insert(name.to_string(), Param { value, m, v, step: 0 });
        Ok(())
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    /// Overwrites a parameter value in place, keeping optimizer state.
    /// Shape changes are contract violations.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter '{}' is {:?}, got {:?}",
                name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// One Adam update from named gradients. Parameters absent from `grads`
    /// keep their value and optimizer state untouched; a gradient for an
    /// unknown or mis-shaped parameter is an error.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if p.value.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for '{}' is {:?}, parameter is {:?}",
                    name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient for '{}'", name)));
            }
            p.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(p.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(p.step as i32);
            let (pv, pm, pvv) = (p.value.data_mut(), p.m.data_mut(), p.v.data_mut());
            for i in 0..pv.len() {
                let gi = g.data()[i];
                pm[i] = cfg.beta1 * pm[i] + (1.0 - cfg.beta1) * gi;
                pvv[i] = cfg.beta2 * pvv[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = pm[i] / bc1;
                let vhat = pvv[i] / bc2;
                pv[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Kaiming-normal initialization: zero-mean Gaussian with std sqrt(2/fan_in),
/// drawn from a ChaCha stream seeded by `seed`. Same arguments, same tensor.
pub fn kaiming_init(shape: impl Into<Vec<usize>>, fan_in: usize, seed: u64) -> Tensor {
    assert!(fan_in > 0, "kaiming_init fan_in must be positive");
    normal_init(shape, (2.0 / fan_in as f64).sqrt(), seed)
}

/// Zero-mean Gaussian initialization with an explicit std.
pub fn normal_init(shape: impl Into<Vec<usize>>, std: f64, seed: u64) -> Tensor {
    assert!(std > 0.0 && std.is_finite(), "init std must be positive, got {std}");
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Tensor::new(shape, data)
}
