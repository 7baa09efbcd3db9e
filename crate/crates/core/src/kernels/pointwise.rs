//! Activations and softmax.

use crate::real::Real;

/// `sqrt(2/π)`
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU:
/// `0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³)))`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let a = T::of(GELU_SQRT_2_OVER_PI);
    let b = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    half * x * (T::one() + (a * (x + b * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let a = T::of(GELU_SQRT_2_OVER_PI);
    let b = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    let u = a * (x + b * x * x * x);
    let t = u.tanh();
    let du = a * (T::one() + T::of(3.0) * b * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Softmax along the middle axis of an `[outer, len, inner]` view, with
/// max-subtraction.
pub fn softmax<T: Real>(outer: usize, len: usize, inner: usize, x: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..len {
                m = m.max(x[at(k)]);
            }
            let mut s = T::zero();
            for k in 0..len {
                let e = (x[at(k)] - m).exp();
                y[at(k)] = e;
                s += e;
            }
            for k in 0..len {
                y[at(k)] /= s;
            }
        }
    }
    y
}

/// In-place row softmax over contiguous rows of length `len`.
pub fn softmax_rows<T: Real>(len: usize, x: &mut [T]) {
    for row in x.chunks_mut(len) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

pub fn softmax_backward<T: Real>(outer: usize, len: usize, inner: usize, y: &[T], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut dot = T::zero();
            for k in 0..len {
                dot += y[at(k)] * dy[at(k)];
            }
            for k in 0..len {
                dx[at(k)] = y[at(k)] * (dy[at(k)] - dot);
            }
        }
    }
    dx
}
