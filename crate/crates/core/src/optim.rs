//! SGD with Nesterov momentum in the form
//! `v ← μ·v − η·g`, `θ ← θ + μ·v − η·g`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_LR: f64 = 0.003;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub lr: f64,
    pub momentum: f64,
    /// One tensor per parameter tensor, same shapes.
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(lr: f64, momentum: f64, params: &[&Tensor<T>]) -> Self {
        OptimizerState {
            lr,
            momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

pub fn nesterov_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    let mu = T::from_f64(state.momentum);
    let lr = T::from_f64(state.lr);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((theta, &grad), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let step = lr * grad;
            *vel = mu * *vel - step;
            *theta = *theta + mu * *vel - step;
        }
    }
    Ok(())
}
