//! Adam optimizer with global-norm gradient clipping.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::{Element, ParamMap};

pub type GradMap<F> = BTreeMap<String, ArrayD<F>>;

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Element>(grads: &mut GradMap<F>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &x in g.iter() {
            let x = x.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = F::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam<F: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Element> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update for every parameter present in `grads`.
    pub fn step(&mut self, params: &mut ParamMap<F>, grads: &GradMap<F>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::from_f64(self.beta1), F::from_f64(self.beta2));
        let one = F::one();
        let bc1 = F::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = F::from_f64(1.0 - self.beta2.powi(t));
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Serialize optimizer moments as named arrays (for checkpoint resume).
    pub fn state_arrays(&self) -> Vec<(String, &ArrayD<F>)> {
        let mut out = Vec::new();
        for (k, v) in &self.m {
            out.push((format!("adam.m.{k}"), v));
        }
        for (k, v) in &self.v {
            out.push((format!("adam.v.{k}"), v));
        }
        out
    }

    /// Restore from named arrays produced by [`Adam::state_arrays`].
    pub fn restore(lr: f64, step: u64, arrays: Vec<(String, ArrayD<F>)>) -> Self {
        let mut opt = Self::new(lr);
        opt.step = step;
        for (name, value) in arrays {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                opt.m.insert(rest.to_string(), value);
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                opt.v.insert(rest.to_string(), value);
            }
        }
        opt
    }
}
