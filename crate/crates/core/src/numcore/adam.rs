use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0)
        {
            return Err(Error::config(format!("invalid Adam configuration {self:?}")));
        }
        Ok(())
    }
}

/// A learnable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Param {
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        }
    }
}

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    fn param(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.param(name).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.param_mut(name).value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.param(name).grad
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let p = self.param_mut(name);
        if p.grad.shape() != g.shape() {
            return Err(Error::DimensionMismatch {
                expected: p.grad.len(),
                found: g.len(),
            });
        }
        p.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad.fill(0.0));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of optimizer steps taken.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, t: u64) {
        self.step = t;
    }

    /// Rounds values and moments to `f32` so the store survives a checkpoint
    /// round trip unchanged.
    pub fn round_to_f32(&mut self) {
        for p in self.params.values_mut() {
            p.value.round_to_f32();
            p.m.round_to_f32();
            p.v.round_to_f32();
        }
    }
}

/// One bias-corrected Adam update over every parameter. Gradients are
/// zeroed afterwards. Nothing is modified if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    if let Some((name, _)) = store.params.iter().find(|(_, p)| !p.grad.is_finite()) {
        return Err(Error::NonFiniteGradient(name.clone()));
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for p in store.params.values_mut() {
        let Param { value, grad, m, v } = p;
        let values = value.data_mut();
        for (k, g) in grad.data_mut().iter_mut().enumerate() {
            let g_eff = *g + cfg.weight_decay * values[k];
            let mk = &mut m.data_mut()[k];
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * g_eff;
            let m_hat = *mk / bc1;
            let vk = &mut v.data_mut()[k];
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * g_eff * g_eff;
            let v_hat = *vk / bc2;
            values[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            *g = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![v]));
        s.accumulate_grad("w", &Tensor::vector(vec![g])).unwrap();
        s
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = scalar_store(0.0, 1.0);
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((s.value("w").data()[0] - expected).abs() < 1e-18);
        // The commonly quoted ≈ -9.99999995e-4 agrees to within rounding.
        assert!((s.value("w").data()[0] + 9.99999995e-4).abs() < 1e-11);
        assert_eq!(s.grad("w").data()[0], 0.0);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::vector(vec![0.3, -1.7, 2.0]));
        s.insert("b", Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let before = s.clone();
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        for name in ["a", "b"] {
            assert_eq!(s.value(name), before.value(name));
        }
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut s = scalar_store(0.5, f64::NAN);
        let before = s.value("w").clone();
        match adam_step(&mut s, &AdamConfig::default()) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.value("w"), &before);
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn deterministic() {
        let mut a = scalar_store(0.25, -0.3);
        let mut b = a.clone();
        let cfg = AdamConfig {
            weight_decay: 0.01,
            ..AdamConfig::default()
        };
        for _ in 0..5 {
            a.accumulate_grad("w", &Tensor::vector(vec![0.7])).unwrap();
            b.accumulate_grad("w", &Tensor::vector(vec![0.7])).unwrap();
            adam_step(&mut a, &cfg).unwrap();
            adam_step(&mut b, &cfg).unwrap();
        }
        assert_eq!(a.value("w").data()[0].to_bits(), b.value("w").data()[0].to_bits());
    }

    #[test]
    fn minimizes_quadratic() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::vector(vec![3.0, -2.0]));
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        for _ in 0..2000 {
            let g = s.value("x").map(|v| 2.0 * v);
            s.accumulate_grad("x", &g).unwrap();
            adam_step(&mut s, &cfg).unwrap();
        }
        assert!(s.value("x").data().iter().all(|v| v.abs() < 1e-2));
    }
}
