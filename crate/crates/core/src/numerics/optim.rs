use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.001 }
    }
}

/// Moments and step count of an AdamW run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamWConfig) -> Self {
        OptimizerState { config, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One decoupled-weight-decay Adam update with bias-corrected moments:
/// `w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)`.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("adamw", format!("{} params, {} grads", params.len(), grads.len())));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.get(i).shape() || state.m[i].shape() != g.shape() {
            return Err(Error::shape("adamw", format!("param {} shape mismatch", params.name(i))));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", params.name(i))));
        }
    }
    let c = state.config;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let (bc1, bc2) = (T::of(bc1), T::of(bc2));
    let (lr, eps, wd) = (T::of(lr), T::of(c.eps), T::of(c.weight_decay));

    for (i, g) in grads.iter().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = params.get_mut(i).data_mut();
        for k in 0..w.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + one_b1 * gk;
            v[k] = b2 * v[k] + one_b2 * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            w[k] = w[k] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * w[k]);
        }
    }
    Ok(())
}

/// Cosine decay from `initial_lr` to `alpha * initial_lr` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub alpha: f64,
    pub total_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial_lr: 5e-4, alpha: 0.1, total_steps: 1 }
    }
}

/// Learning rate at `step`; steps past the end hold the floor.
pub fn cosine_lr(step: u64, schedule: &LrSchedule) -> f64 {
    let total = schedule.total_steps.max(1);
    let progress = step.min(total) as f64 / total as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    schedule.initial_lr * (schedule.alpha + (1.0 - schedule.alpha) * cosine)
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> Result<f64> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradients before clipping".into()));
    }
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    Ok(norm)
}
