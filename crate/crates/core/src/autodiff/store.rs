//! Named parameter tensors with gradients, Adam moments and the
//! non-trainable state buffers (batch-norm running statistics).

use std::collections::BTreeMap;

use super::Scalar;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One trainable tensor with its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub grad: Vec<S>,
    pub m: Vec<S>,
    pub v: Vec<S>,
}

/// Non-trainable buffer (running mean / running variance).
#[derive(Debug, Clone)]
pub struct StateBuf<S> {
    pub shape: Vec<usize>,
    pub value: Vec<S>,
}

/// Named parameters and state, ordered by name for deterministic
/// iteration, checkpoints and updates.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Param<S>>,
    states: BTreeMap<String, StateBuf<S>>,
    step: u64,
    has_grads: bool,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new(), states: BTreeMap::new(), step: 0, has_grads: false }
    }

    pub fn add_param(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>) -> Result<()> {
        let len: usize = shape.iter().product();
        if value.len() != len {
            return Err(Error::Shape(format!(
                "param {name}: shape {shape:?} wants {len} values, got {}",
                value.len()
            )));
        }
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate param name {name}")));
        }
        self.params.insert(
            name.to_string(),
            Param {
                shape,
                value: value.into_iter().map(S::from_f64).collect(),
                grad: vec![S::ZERO; len],
                m: vec![S::ZERO; len],
                v: vec![S::ZERO; len],
            },
        );
        Ok(())
    }

    pub fn add_state(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>) -> Result<()> {
        let len: usize = shape.iter().product();
        if value.len() != len {
            return Err(Error::Shape(format!(
                "state {name}: shape {shape:?} wants {len} values, got {}",
                value.len()
            )));
        }
        if self.states.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate state name {name}")));
        }
        self.states.insert(
            name.to_string(),
            StateBuf { shape, value: value.into_iter().map(S::from_f64).collect() },
        );
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Param<S>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown param {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param<S>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown param {name}")))
    }

    pub fn state(&self, name: &str) -> Result<&StateBuf<S>> {
        self.states
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown state {name}")))
    }

    pub fn state_mut(&mut self, name: &str) -> Result<&mut StateBuf<S>> {
        self.states
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown state {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.params.iter()
    }

    pub fn states(&self) -> impl Iterator<Item = (&String, &StateBuf<S>)> {
        self.states.iter()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[S]) -> Result<()> {
        let p = self.param_mut(name)?;
        if p.grad.len() != grad.len() {
            return Err(Error::Shape(format!(
                "grad for {name}: expected {} values, got {}",
                p.grad.len(),
                grad.len()
            )));
        }
        for (acc, &g) in p.grad.iter_mut().zip(grad) {
            *acc += g;
        }
        self.has_grads = true;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = S::ZERO);
        }
        self.has_grads = false;
    }

    /// Cast every buffer (values, moments, states; gradients reset).
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let conv = |v: &[S]| v.iter().map(|&x| T::from_f64(x.to_f64())).collect::<Vec<T>>();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            shape: p.shape.clone(),
                            value: conv(&p.value),
                            grad: vec![T::ZERO; p.value.len()],
                            m: conv(&p.m),
                            v: conv(&p.v),
                        },
                    )
                })
                .collect(),
            states: self
                .states
                .iter()
                .map(|(k, s)| {
                    (k.clone(), StateBuf { shape: s.shape.clone(), value: conv(&s.value) })
                })
                .collect(),
            step: self.step,
            has_grads: false,
        }
    }
}

/// One Adam update (bias-corrected, beta1 = 0.9, beta2 = 0.999,
/// eps = 1e-8) over every parameter; increments the shared step counter
/// and zeroes all gradients.
pub fn adam_step<S: Scalar>(store: &mut ParamStore<S>, lr: f64) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if !store.has_grads {
        return Err(Error::State(
            "adam_step called with no gradients populated; run backward + write_grads first".into(),
        ));
    }
    store.step += 1;
    let t = store.step as i32;
    let b1 = S::from_f64(ADAM_BETA1);
    let b2 = S::from_f64(ADAM_BETA2);
    let one_minus_b1 = S::from_f64(1.0 - ADAM_BETA1);
    let one_minus_b2 = S::from_f64(1.0 - ADAM_BETA2);
    let corr1 = S::from_f64(1.0 / (1.0 - ADAM_BETA1.powi(t)));
    let corr2 = S::from_f64(1.0 / (1.0 - ADAM_BETA2.powi(t)));
    let eps = S::from_f64(ADAM_EPS);
    let lr = S::from_f64(lr);
    for p in store.params.values_mut() {
        for i in 0..p.value.len() {
            let g = p.grad[i];
            p.m[i] = b1 * p.m[i] + one_minus_b1 * g;
            p.v[i] = b2 * p.v[i] + one_minus_b2 * (g * g);
            let m_hat = p.m[i] * corr1;
            let v_hat = p.v[i] * corr2;
            p.value[i] = p.value[i] - lr * m_hat / (v_hat.sqrt() + eps);
            p.grad[i] = S::ZERO;
        }
    }
    store.has_grads = false;
    Ok(())
}
