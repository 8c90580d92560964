//! Test-only reference implementations, written as straight-line scalar
//! loops directly from the update equations. They deliberately share no code
//! with the crate so they can serve as independent oracles.

#![allow(dead_code)]

/// Reference optimizer state: step counter plus the three buffers.
#[derive(Debug, Clone)]
pub struct RefState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
}

impl RefState {
    pub fn zeros(n: usize) -> Self {
        RefState {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            u: vec![0.0; n],
        }
    }
}

pub fn ref_sgd(w: &mut [f64], g: &[f64], state: &mut RefState, lr: f64) {
    state.t += 1;
    for i in 0..w.len() {
        w[i] -= lr * g[i];
    }
}

pub fn ref_rmsprop(w: &mut [f64], g: &[f64], state: &mut RefState, lr: f64, rho: f64, eps: f64) {
    state.t += 1;
    for i in 0..w.len() {
        state.v[i] = rho * state.v[i] + (1.0 - rho) * g[i] * g[i];
        w[i] -= lr * g[i] / (state.v[i].sqrt() + eps);
    }
}

pub fn ref_adam(
    w: &mut [f64],
    g: &[f64],
    state: &mut RefState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.t += 1;
    let t = state.t as i32;
    for i in 0..w.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = state.m[i] / (1.0 - beta1.powi(t));
        let v_hat = state.v[i] / (1.0 - beta2.powi(t));
        w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

pub fn ref_adadelta(w: &mut [f64], g: &[f64], state: &mut RefState, lr: f64, rho: f64, eps: f64) {
    state.t += 1;
    for i in 0..w.len() {
        state.v[i] = rho * state.v[i] + (1.0 - rho) * g[i] * g[i];
        let delta = -((state.u[i] + eps).sqrt() / (state.v[i] + eps).sqrt()) * g[i];
        state.u[i] = rho * state.u[i] + (1.0 - rho) * delta * delta;
        w[i] += lr * delta;
    }
}

/// Gradient of `f(w) = ||w||^2 / 2`.
pub fn quadratic_grad(w: &[f64]) -> Vec<f64> {
    w.to_vec()
}

/// Gradient of the 2-D Rosenbrock function
/// `f(x, y) = (1 - x)^2 + 100 (y - x^2)^2`.
pub fn rosenbrock_grad(w: &[f64]) -> Vec<f64> {
    let (x, y) = (w[0], w[1]);
    vec![
        -2.0 * (1.0 - x) - 400.0 * x * (y - x * x),
        200.0 * (y - x * x),
    ]
}
