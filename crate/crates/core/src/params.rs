//! Named parameter storage, initialisation, Adam and EMA.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Ordered map from parameter name to tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace a tensor by name; the shape must not change.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))?;
        if self.tensors[id].shape() != t.shape() {
            return Err(Error::dim("set", format!("{name}: {:?} vs {:?}", self.tensors[id].shape(), t.shape())));
        }
        self.tensors[id] = t;
        Ok(())
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// Push every tensor onto the tape as a leaf.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if requires_grad { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    /// Gradients for `vars` (zeros where no gradient reached).
    pub fn collect_grads(&self, tape: &Tape, vars: &[Var]) -> Vec<Vec<f64>> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::raw(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// Xavier-uniform for a `fan_in × fan_out` matrix.
pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::raw(vec![fan_in, fan_out], (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables it.
    pub clip: Option<f64>,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: Some(1.0), step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update; returns the pre-clip global gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<f64> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::dim("adam", format!("{} grads for {} params", grads.len(), store.len())));
        }
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "adam" });
        }
        let factor = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = store.tensors[id].data_mut();
            for i in 0..p.len() {
                let gi = g[i] * factor;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}

/// `θ⁻ ← μ θ⁻ + (1 − μ) θ`.
pub fn ema_update(ema: &mut ParamStore, online: &ParamStore, decay: f64) -> Result<()> {
    if !ema.same_layout(online) {
        return Err(Error::Usage("EMA and online parameters differ in layout".into()));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Config(format!("EMA decay {decay} outside [0, 1]")));
    }
    for (e, o) in ema.tensors.iter_mut().zip(&online.tensors) {
        for (a, b) in e.data_mut().iter_mut().zip(o.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn ema_interpolates() {
        let mut ema = store(&[0.0, 10.0]);
        let online = store(&[1.0, 0.0]);
        ema_update(&mut ema, &online, 0.75).unwrap();
        assert_eq!(ema.get("w").unwrap().data(), &[0.25, 7.5]);
        ema_update(&mut ema, &online, 0.0).unwrap();
        assert_eq!(ema.get("w").unwrap().data(), online.get("w").unwrap().data());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = store(&[1.0, -2.0]);
        let mut adam = Adam::new(&s, 0.1);
        adam.clip = None;
        adam.update(&mut s, &[vec![3.0, -0.5]]).unwrap();
        let d = s.get("w").unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut s = store(&[3.0]);
        let mut adam = Adam::new(&s, 0.05);
        for _ in 0..2000 {
            let x = s.get("w").unwrap().data()[0];
            adam.update(&mut s, &[vec![2.0 * (x - 1.0)]]).unwrap();
        }
        assert!((s.get("w").unwrap().data()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store(&[1.0, 2.0]);
        assert!(s.insert("w", Tensor::scalar(0.0)).is_err());
        assert!(s.set("w", Tensor::scalar(0.0)).is_err());
    }
}
