//! Adam updates over a [`ParamStore`], with optional frozen parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T> {
    pub config: AdamConfig,
    /// Parameters whose name starts with any of these prefixes are skipped.
    pub frozen: Vec<String>,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            frozen: Vec::new(),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::cst(c.beta1), T::cst(c.beta2));
        let (lr, eps) = (T::cst(c.lr), T::cst(c.eps));
        let (bc1, bc2) = (T::cst(bc1), T::cst(bc2));
        for (name, g) in grads {
            if self.is_frozen(name) {
                continue;
            }
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("gradient for {name}: {:?} vs {:?}", g.shape(), p.shape())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let upd = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                p.data_mut()[i] -= upd;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = ParamStore::<f64>::new();
        p.insert("a", Tensor::full(&[3], 1.5));
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.0,
            ..Default::default()
        });
        let g = BTreeMap::from([("a".to_string(), Tensor::full(&[3], 2.0))]);
        opt.apply(&mut p, &g).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamStore::<f64>::new();
        p.insert("a", Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::default());
        let g = BTreeMap::from([("a".to_string(), Tensor::new(&[2], vec![3.0, -0.5]).unwrap())]);
        opt.apply(&mut p, &g).unwrap();
        let a = p.get("a").unwrap().data();
        assert!((a[0] + 5e-3).abs() < 1e-9 && (a[1] - 5e-3).abs() < 1e-9);
    }

    #[test]
    fn frozen_prefix_skipped() {
        let mut p = ParamStore::<f64>::new();
        p.insert("sma.0.wq", Tensor::full(&[1], 1.0));
        p.insert("sma.0.alpha", Tensor::full(&[1], 0.0));
        let mut opt = Adam::new(AdamConfig::default());
        opt.frozen = vec!["sma.0.w".into()];
        let g = BTreeMap::from([
            ("sma.0.wq".to_string(), Tensor::full(&[1], 1.0)),
            ("sma.0.alpha".to_string(), Tensor::full(&[1], 1.0)),
        ]);
        opt.apply(&mut p, &g).unwrap();
        assert_eq!(p.get("sma.0.wq").unwrap().data()[0], 1.0);
        assert!(p.get("sma.0.alpha").unwrap().data()[0] < 0.0);
    }
}
