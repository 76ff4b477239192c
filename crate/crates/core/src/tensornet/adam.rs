use std::collections::HashMap;

use rand::Rng;

use super::{Real, Tensor4};
use crate::error::{Error, Result};

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor4<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState<T> {
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

/// Ordered parameter collection with gradient slots and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    adam: Option<AdamState<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            adam: None,
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor4<T>) {
        if let Some(&i) = self.index.get(name) {
            self.params[i].value = value;
        } else {
            self.index.insert(name.to_string(), self.params.len());
            self.params.push(Param {
                name: name.to_string(),
                value,
            });
        }
        self.adam = None;
    }

    /// Inserts a tensor drawn from `U(-bound, bound)`.
    pub fn insert_uniform(&mut self, name: &str, shape: [usize; 4], bound: f64, rng: &mut impl Rng) {
        let t = Tensor4::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)));
        self.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor4<T>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].value)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor4<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].value),
            None => Err(Error::MissingParameter(name.to_string())),
        }
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[T]) -> Result<()> {
        self.get_mut(name)?.accumulate_grad(g)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.clear_grad();
        }
    }

    /// Multiplies every gradient by `factor` (used to average accumulated
    /// gradients).
    pub fn scale_grads(&mut self, factor: T) {
        for p in &mut self.params {
            if let Some(g) = p.value.grad_mut() {
                g.iter_mut().for_each(|v| *v = *v * factor);
            }
        }
    }

    pub fn adam_step_count(&self) -> u64 {
        self.adam.as_ref().map_or(0, |a| a.step)
    }

    /// One Adam update with bias correction. Fails if any parameter has no
    /// gradient.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.value.grad().is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        let state = self.adam.get_or_insert_with(|| AdamState {
            step: 0,
            m: self.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            v: self.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        });
        state.step += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::one() - T::of(cfg.beta1.powi(state.step as i32));
        let c2 = T::one() - T::of(cfg.beta2.powi(state.step as i32));
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        for (k, p) in self.params.iter_mut().enumerate() {
            let g = p.value.grad().expect("checked above").to_vec();
            let (m, v) = (&mut state.m[k], &mut state.v[k]);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Adam moments as named tensors (`m/<name>`, `v/<name>`), for
    /// checkpoint sidecars.
    pub fn optimizer_state(&self) -> Option<(u64, Vec<(String, Tensor4<T>)>)> {
        let st = self.adam.as_ref()?;
        let mut out = Vec::new();
        for (k, p) in self.params.iter().enumerate() {
            let shape = p.value.shape();
            out.push((format!("m/{}", p.name), Tensor4::from_vec(shape, st.m[k].clone()).ok()?));
            out.push((format!("v/{}", p.name), Tensor4::from_vec(shape, st.v[k].clone()).ok()?));
        }
        Some((st.step, out))
    }

    pub fn set_optimizer_state(&mut self, step: u64, tensors: &HashMap<String, Vec<T>>) -> Result<()> {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in &self.params {
            for (prefix, dst) in [("m", &mut m), ("v", &mut v)] {
                let key = format!("{prefix}/{}", p.name);
                let t = tensors.get(&key).ok_or_else(|| Error::MissingParameter(key.clone()))?;
                if t.len() != p.value.len() {
                    return Err(Error::Shape(format!("optimizer slot {key} has wrong length")));
                }
                dst.push(t.clone());
            }
        }
        self.adam = Some(AdamState { step, m, v });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor4::from_vec([1, 1, 1, 1], vec![v]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut s = scalar_store(0.7);
        s.accumulate_grad("w", &[0.0]).unwrap();
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        s.accumulate_grad("w", &[1.0]).unwrap();
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        s.adam_step(&cfg).unwrap();
        assert!((s.get("w").unwrap().data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn identical_stores_update_identically() {
        let mut a = scalar_store(0.3);
        let mut b = scalar_store(0.3);
        for step in 0..5 {
            let g = [0.1 * step as f64 - 0.2];
            a.zero_grad();
            b.zero_grad();
            a.accumulate_grad("w", &g).unwrap();
            b.accumulate_grad("w", &g).unwrap();
            a.adam_step(&AdamConfig::default()).unwrap();
            b.adam_step(&AdamConfig::default()).unwrap();
        }
        assert_eq!(a.get("w").unwrap().data()[0].to_bits(), b.get("w").unwrap().data()[0].to_bits());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = scalar_store(0.3);
        assert!(matches!(s.adam_step(&AdamConfig::default()), Err(Error::MissingGradient(n)) if n == "w"));
        assert!(matches!(s.get("nope"), Err(Error::MissingParameter(_))));
    }
}
