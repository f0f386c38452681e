//! Adam without bias correction, with decoupled weight decay inside the
//! learning-rate product.

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("eps must be positive and weight_decay non-negative"));
        }
        Ok(())
    }
}

/// First and second moment accumulators of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Tensor<S>,
    pub v: Tensor<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
        }
    }
}

/// `p ← p − lr·(m/(√v+eps) + wd·p)` with `m, v` the raw moving averages.
pub fn bert_adam_step<S: Scalar>(param: &mut Tensor<S>, grad: &[S], state: &mut AdamState<S>, cfg: &AdamConfig) -> Result<()> {
    if grad.len() != param.numel() || state.m.shape() != param.shape() || state.v.shape() != param.shape() {
        return Err(Error::shape(format!(
            "optimizer step on {:?} with {} gradient entries and state {:?}",
            param.shape(),
            grad.len(),
            state.m.shape()
        )));
    }
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let (lr, eps, wd) = (S::lit(cfg.lr), S::lit(cfg.eps), S::lit(cfg.weight_decay));
    let one = S::one();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, p) in param.data_mut().iter_mut().enumerate() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        *p = *p - lr * (m[i] / (v[i].sqrt() + eps) + wd * *p);
    }
    Ok(())
}

/// Optimizer over every trainable entry of a parameter store.
#[derive(Clone, Debug)]
pub struct BertAdam<S> {
    pub config: AdamConfig,
    states: Vec<Option<AdamState<S>>>,
}

impl<S: Scalar> BertAdam<S> {
    pub fn new(config: AdamConfig, params: &ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let states = params
            .entries()
            .iter()
            .map(|p| p.trainable.then(|| AdamState::new(p.value.shape())))
            .collect();
        Ok(BertAdam { config, states })
    }

    /// Frozen entries and entries without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Option<Vec<S>>]) -> Result<()> {
        if grads.len() != params.len() || self.states.len() != params.len() {
            return Err(Error::shape("gradient list does not match the parameter store"));
        }
        for (i, g) in grads.iter().enumerate() {
            if let (Some(g), Some(state)) = (g, self.states[i].as_mut()) {
                bert_adam_step(params.value_mut(i), g, state, &self.config)?;
            }
        }
        Ok(())
    }
}
