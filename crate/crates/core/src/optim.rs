//! RMSProp.

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    acc: Vec<Matrix>,
}

impl Default for RmsProp {
    fn default() -> Self {
        RmsProp::new(0.001, 0.9, 1e-8)
    }
}

impl RmsProp {
    pub fn new(lr: f64, rho: f64, eps: f64) -> Self {
        RmsProp {
            lr,
            rho,
            eps,
            acc: Vec::new(),
        }
    }

    /// Running mean of squared gradients, one matrix per parameter.
    pub fn accumulators(&self) -> &[Matrix] {
        &self.acc
    }

    /// `acc ← ρ·acc + (1−ρ)·g²;  p ← p − lr·g / √(acc + ε)`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let (values, grads) = params.values_and_grads_mut();
        if self.acc.is_empty() {
            self.acc = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
        }
        if self.acc.len() != values.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.acc.len(),
                values.len()
            )));
        }
        for ((p, g), a) in values.iter_mut().zip(grads).zip(&mut self.acc) {
            if p.shape() != g.shape() || a.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "parameter {}x{} with gradient {}x{}",
                    p.rows(),
                    p.cols(),
                    g.rows(),
                    g.cols()
                )));
            }
            for ((pv, &gv), av) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(a.as_mut_slice())
            {
                *av = self.rho * *av + (1.0 - self.rho) * gv * gv;
                *pv -= self.lr * gv / (*av + self.eps).sqrt();
            }
        }
        Ok(())
    }
}
