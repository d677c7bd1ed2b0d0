//! AdamW with decoupled weight decay.

use crate::error::{bail, Error, Result};
use crate::graph::ParamGrads;
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bail!(Parameter, "learning rate {} must be finite and nonnegative", self.learning_rate);
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                bail!(Parameter, "{name} = {b} outside (0, 1)");
            }
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            bail!(Parameter, "epsilon must be positive and weight decay nonnegative");
        }
        Ok(())
    }
}

/// Optimizer state: hyperparameters, step count, and first/second moments
/// per parameter.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step_count: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect::<Vec<_>>();
        Ok(Self { config, step_count: 0, first: zeros(), second: zeros() })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    /// Restores saved state (used when resuming from a checkpoint).
    pub fn restore(&mut self, step_count: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Result<()> {
        let same = |a: &[Vec<T>], b: &[Vec<T>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&first, &self.first) || !same(&second, &self.second) {
            bail!(Dimension, "optimizer moments do not match parameter shapes");
        }
        self.step_count = step_count;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!("gradient at optimizer step {}", self.step_count + 1)));
        }
        self.step_count += 1;
        let c = &self.config;
        let t = self.step_count as i32;
        let lr = T::lit(c.learning_rate);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let eps = T::lit(c.epsilon);
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for (id, g) in grads.iter() {
            let i = id.index();
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let p = store.get_mut(*id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] = p[k] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
