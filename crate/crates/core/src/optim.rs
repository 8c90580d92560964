//! First-order update rules: SGD, RMSProp, Adam, and Adadelta.
//!
//! Each rule is a pure state transition over `(weights, gradient, state)`;
//! [`Optimizer`] lifts a rule over a whole model via [`Parameters`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::Parameters;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("gradient list has {got} entries, model has {expected} parameters")]
    GradientCount { expected: usize, got: usize },
    #[error("invalid optimizer spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Rmsprop,
    Adam,
    Adadelta,
}

impl OptimKind {
    pub const ALL: [OptimKind; 4] = [
        OptimKind::Sgd,
        OptimKind::Rmsprop,
        OptimKind::Adam,
        OptimKind::Adadelta,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OptimKind::Sgd => "sgd",
            OptimKind::Rmsprop => "rmsprop",
            OptimKind::Adam => "adam",
            OptimKind::Adadelta => "adadelta",
        }
    }
}

impl fmt::Display for OptimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimKind::Sgd),
            "rmsprop" => Ok(OptimKind::Rmsprop),
            "adam" => Ok(OptimKind::Adam),
            "adadelta" => Ok(OptimKind::Adadelta),
            other => Err(format!(
                "unknown optimizer '{other}' (expected sgd, rmsprop, adam, or adadelta)"
            )),
        }
    }
}

/// Update-rule hyperparameters. `rho` is the decay for RMSProp/Adadelta,
/// `beta1`/`beta2` the Adam moments, `eps` the numerical floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimKind,
    pub lr: f64,
    pub rho: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerSpec {
    /// Spec with the per-kind default hyperparameters.
    pub fn new(kind: OptimKind, lr: f64) -> Self {
        let (rho, eps) = match kind {
            OptimKind::Adadelta => (0.95, 1e-6),
            _ => (0.9, 1e-8),
        };
        OptimizerSpec {
            kind,
            lr,
            rho,
            beta1: 0.9,
            beta2: 0.999,
            eps,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr > 0.0) {
            return Err(OptimError::InvalidSpec(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (name, v) in [("rho", self.rho), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < v && v < 1.0) {
                return Err(OptimError::InvalidSpec(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(OptimError::InvalidSpec(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Per-parameter moment/accumulator buffers. Unused buffers stay zero;
/// `step` advances by exactly one per update.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// First moment (Adam).
    pub m: Tensor,
    /// Second moment / squared-gradient accumulator (RMSProp, Adam, Adadelta).
    pub v: Tensor,
    /// Squared-update accumulator (Adadelta).
    pub u: Tensor,
}

impl OptimizerState {
    pub fn zeros(shape: &[usize]) -> Self {
        OptimizerState {
            step: 0,
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
            u: Tensor::zeros(shape.to_vec()),
        }
    }
}

/// `w' = w - lr * g`.
pub fn sgd_step(w: &Tensor, g: &Tensor, spec: &OptimizerSpec) -> Result<Tensor, OptimError> {
    Ok(w.zip(g, "sgd_step", |wi, gi| wi - spec.lr * gi)?)
}

/// `v' = rho*v + (1-rho)*g^2; w' = w - lr * g / (sqrt(v') + eps)`.
pub fn rmsprop_step(
    w: &Tensor,
    g: &Tensor,
    state: &OptimizerState,
    spec: &OptimizerSpec,
) -> Result<(Tensor, OptimizerState), OptimError> {
    if w.shape() != g.shape() {
        return Err(OptimError::Tensor(TensorError::ShapeMismatch {
            op: "rmsprop_step",
            lhs: w.shape().to_vec(),
            rhs: g.shape().to_vec(),
        }));
    }
    let v = state.v.zip(g, "rmsprop_step", |vi, gi| {
        spec.rho * vi + (1.0 - spec.rho) * gi * gi
    })?;
    let data: Vec<f64> = w
        .data()
        .iter()
        .zip(g.data())
        .zip(v.data())
        .map(|((&wi, &gi), &vi)| wi - spec.lr * gi / (vi.sqrt() + spec.eps))
        .collect();
    let w_next = Tensor::from_vec(w.shape().to_vec(), data)?;
    let next = OptimizerState {
        step: state.step + 1,
        m: state.m.clone(),
        v,
        u: state.u.clone(),
    };
    Ok((w_next, next))
}

/// Bias-corrected Adam:
/// `m'=b1*m+(1-b1)g; v'=b2*v+(1-b2)g^2; w'=w-lr*m_hat/(sqrt(v_hat)+eps)`.
pub fn adam_step(
    w: &Tensor,
    g: &Tensor,
    state: &OptimizerState,
    spec: &OptimizerSpec,
) -> Result<(Tensor, OptimizerState), OptimError> {
    let t = state.step + 1;
    let m = state.m.zip(g, "adam_step", |mi, gi| {
        spec.beta1 * mi + (1.0 - spec.beta1) * gi
    })?;
    let v = state.v.zip(g, "adam_step", |vi, gi| {
        spec.beta2 * vi + (1.0 - spec.beta2) * gi * gi
    })?;
    let bc1 = 1.0 - spec.beta1.powi(t as i32);
    let bc2 = 1.0 - spec.beta2.powi(t as i32);
    let data: Vec<f64> = w
        .data()
        .iter()
        .zip(m.data())
        .zip(v.data())
        .map(|((&wi, &mi), &vi)| {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            wi - spec.lr * m_hat / (v_hat.sqrt() + spec.eps)
        })
        .collect();
    let w_next = Tensor::from_vec(w.shape().to_vec(), data)?;
    let next = OptimizerState {
        step: t,
        m,
        v,
        u: state.u.clone(),
    };
    Ok((w_next, next))
}

/// Adadelta with a learning-rate multiplier on the native step:
/// `v'=rho*v+(1-rho)g^2; d=-(sqrt(u+eps)/sqrt(v'+eps))*g; u'=rho*u+(1-rho)d^2;
/// w'=w+lr*d`. `lr = 1` recovers the textbook rule.
pub fn adadelta_step(
    w: &Tensor,
    g: &Tensor,
    state: &OptimizerState,
    spec: &OptimizerSpec,
) -> Result<(Tensor, OptimizerState), OptimError> {
    if w.shape() != g.shape() {
        return Err(OptimError::Tensor(TensorError::ShapeMismatch {
            op: "adadelta_step",
            lhs: w.shape().to_vec(),
            rhs: g.shape().to_vec(),
        }));
    }
    let v = state.v.zip(g, "adadelta_step", |vi, gi| {
        spec.rho * vi + (1.0 - spec.rho) * gi * gi
    })?;
    let mut delta = vec![0.0; w.numel()];
    for i in 0..w.numel() {
        delta[i] = -((state.u.data()[i] + spec.eps).sqrt() / (v.data()[i] + spec.eps).sqrt())
            * g.data()[i];
    }
    let u = Tensor::from_vec(
        w.shape().to_vec(),
        state
            .u
            .data()
            .iter()
            .zip(&delta)
            .map(|(&ui, &di)| spec.rho * ui + (1.0 - spec.rho) * di * di)
            .collect(),
    )?;
    let data: Vec<f64> = w
        .data()
        .iter()
        .zip(&delta)
        .map(|(&wi, &di)| wi + spec.lr * di)
        .collect();
    let w_next = Tensor::from_vec(w.shape().to_vec(), data)?;
    let next = OptimizerState {
        step: state.step + 1,
        m: state.m.clone(),
        v,
        u,
    };
    Ok((w_next, next))
}

/// Single-parameter dispatch over the four rules.
pub fn step(
    w: &Tensor,
    g: &Tensor,
    state: &OptimizerState,
    spec: &OptimizerSpec,
) -> Result<(Tensor, OptimizerState), OptimError> {
    if w.shape() != g.shape() {
        return Err(OptimError::Tensor(TensorError::ShapeMismatch {
            op: "optimizer_step",
            lhs: w.shape().to_vec(),
            rhs: g.shape().to_vec(),
        }));
    }
    match spec.kind {
        OptimKind::Sgd => {
            let w_next = sgd_step(w, g, spec)?;
            let mut next = state.clone();
            next.step += 1;
            Ok((w_next, next))
        }
        OptimKind::Rmsprop => rmsprop_step(w, g, state, spec),
        OptimKind::Adam => adam_step(w, g, state, spec),
        OptimKind::Adadelta => adadelta_step(w, g, state, spec),
    }
}

/// Steps every parameter of a model independently, keeping one state per
/// parameter. States are allocated lazily on the first apply.
pub struct Optimizer {
    spec: OptimizerSpec,
    states: Vec<OptimizerState>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        Optimizer {
            spec,
            states: Vec::new(),
        }
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn apply<P: Parameters>(&mut self, model: &mut P, grads: &[Tensor]) -> Result<(), OptimError> {
        let expected = model.param_count();
        if grads.len() != expected {
            return Err(OptimError::GradientCount {
                expected,
                got: grads.len(),
            });
        }
        if self.states.is_empty() {
            model.visit_params(&mut |t| self.states.push(OptimizerState::zeros(t.shape())));
        }
        let mut idx = 0;
        let mut failure = None;
        let spec = self.spec.clone();
        let states = &mut self.states;
        model.visit_params_mut(&mut |w| {
            if failure.is_some() {
                return;
            }
            match step(w, &grads[idx], &states[idx], &spec) {
                Ok((w_next, s_next)) => {
                    *w = w_next;
                    states[idx] = s_next;
                }
                Err(e) => failure = Some(e),
            }
            idx += 1;
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
