//! Tensor-in, tensor-out forms of the differentiable ops.
//!
//! Each call records a throwaway tape, so results are bit-identical to the
//! values seen during training.

use crate::autograd::{Activation, Tape, Var};
use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

fn eval<T: Real, const K: usize>(
    inputs: [&Tensor<T>; K],
    f: impl FnOnce(&mut Tape<T>, [Var; K]) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = inputs.map(|t| tape.constant(t.clone()));
    let y = f(&mut tape, vars)?;
    Ok(tape.value(y).clone())
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    match bias {
        Some(b) => eval([x, w, b], |t, [x, w, b]| t.conv2d(x, w, Some(b), stride, padding, groups)),
        None => eval([x, w], |t, [x, w]| t.conv2d(x, w, None, stride, padding, groups)),
    }
}

/// Affine map over the last axis with `w[Dout, Din]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match bias {
        Some(b) => eval([x, w, b], |t, [x, w, b]| t.linear(x, w, Some(b))),
        None => eval([x, w], |t, [x, w]| t.linear(x, w, None)),
    }
}

/// Batch normalisation. In training mode the running statistics are updated
/// in place with an exponential average of rate `momentum`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    training: bool,
    eps: f64,
    momentum: f64,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (xv, g, b) = (
        tape.constant(x.clone()),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    );
    let y = tape.batch_norm(
        xv,
        g,
        b,
        running_mean.data(),
        running_var.data(),
        training,
        eps,
        momentum,
        "",
    )?;
    for upd in tape.take_running_updates() {
        running_mean.data_mut().copy_from_slice(&upd.mean);
        running_var.data_mut().copy_from_slice(&upd.var);
    }
    Ok(tape.value(y).clone())
}

pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    eval([x, gamma, beta], |t, [x, g, b]| t.layer_norm(x, g, b, eps))
}

pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    eval([x], |t, [x]| t.softmax(x, axis))
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    eval([x], |t, [x]| t.activation(x, kind))
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    eval([x], |t, [x]| t.global_avg_pool(x))
}

pub fn max_pool2d<T: Real>(x: &Tensor<T>, k: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
    eval([x], |t, [x]| t.max_pool2d(x, k, stride, padding))
}

pub fn add_residual<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    eval([x, y], |t, [x, y]| t.add(x, y))
}
