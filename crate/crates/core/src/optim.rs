//! Adam and validation-Dice early stopping.

use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::Params;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        let zeros = || params.items().iter().map(Tensor::zeros_like).collect();
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<f32>], &[Tensor<f32>]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update. Every parameter needs a gradient; the
    /// gradients are zeroed afterwards. Nothing is modified on error.
    pub fn step(&mut self, params: &mut Params, grads: &mut [Option<Tensor<f32>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(alloc::format!(
                "{} gradients / {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let name = &params.names()[i];
            match g {
                None => return Err(Error::MissingGradient(name.clone())),
                Some(g) if g.shape() != params.items()[i].shape() => {
                    return Err(Error::Shape { op: "adam", left: g.shape(), right: params.items()[i].shape() })
                }
                _ => {}
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        for (i, p) in params.items_mut().iter_mut().enumerate() {
            let g = grads[i].as_mut().expect("checked above");
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                *pj -= (c.lr * m_hat / (v_hat.sqrt() + c.eps)) as f32;
            }
            g.data_mut().fill(0.0);
        }
        Ok(())
    }
}

/// Quantises a validation score to 1e-6 so improvement tests are exact.
pub fn quantize_score(x: f64) -> i64 {
    (x * 1e6).round() as i64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    best: Option<i64>,
    since_best: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(EarlyStop { patience, best: None, since_best: 0 })
    }

    /// Records one epoch's score; returns `(improved, stop)`.
    pub fn observe(&mut self, score: f64) -> (bool, bool) {
        let q = quantize_score(score);
        let improved = self.best.is_none_or(|b| q > b);
        if improved {
            self.best = Some(q);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.since_best >= self.patience)
    }
}
