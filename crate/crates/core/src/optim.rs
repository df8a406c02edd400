//! Adaptive moment estimation with optional global-norm gradient clipping.

use std::collections::BTreeMap;

use docseg_autograd::{ParamStore, Real};
use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("optimizer needs lr > 0, betas in [0, 1) and eps > 0".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("optimizer.clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// Optimizer state: first and second moments per parameter and the step count.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self {
            m: ParamStore::new(),
            v: ParamStore::new(),
            t: 0,
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Real>(grads: &BTreeMap<String, ArrayD<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt()
}

impl<T: Real> Adam<T> {
    /// One update. Parameters without a gradient keep their value and moments.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, ArrayD<T>>, cfg: &OptimConfig) {
        self.t += 1;
        let norm = grad_norm(grads);
        let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let step = T::of(cfg.lr * bc2.sqrt() / bc1);
        let eps = T::of(cfg.eps * bc2.sqrt());
        let s = T::of(scale);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name.clone(), ArrayD::zeros(p.raw_dim()));
                self.v.insert(name.clone(), ArrayD::zeros(p.raw_dim()));
            }
            let m = self.m.get_mut(name).expect("moment");
            let v = self.v.get_mut(name).expect("moment");
            Zip::from(p).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
                let g = g * s;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn first_step_moves_by_lr_in_the_gradient_sign() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, 2.0, 3.0]).unwrap());
        ps.insert("frozen", ArrayD::zeros(IxDyn(&[2])));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, -4.0, 0.0]).unwrap());
        let cfg = OptimConfig { lr: 0.1, ..Default::default() };
        let mut opt = Adam::default();
        opt.step(&mut ps, &grads, &cfg);
        let w = ps.get("w").unwrap();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 2.1).abs() < 1e-6 && w[2] == 3.0);
        assert!(!opt.m.contains("frozen"));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("x", ArrayD::from_elem(IxDyn(&[2]), 5.0));
        let cfg = OptimConfig { lr: 0.05, ..Default::default() };
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let g = ps.get("x").unwrap().mapv(|v| 2.0 * (v - 1.0));
            opt.step(&mut ps, &BTreeMap::from([("x".to_string(), g)]), &cfg);
        }
        assert!(ps.get("x").unwrap().iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let grads = BTreeMap::from([("a".to_string(), ArrayD::from_elem(IxDyn(&[4]), 3.0))]);
        assert!((grad_norm(&grads) - 6.0).abs() < 1e-12);
        assert!(OptimConfig { clip_norm: -1.0, ..Default::default() }.validate().is_err());
    }
}
