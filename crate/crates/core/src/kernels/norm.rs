//! Batch and layer normalisation over an `[outer, C, inner]` view.
//!
//! Batch norm reduces over `outer × inner` per channel; layer norm reduces
//! over `C` per `(outer, inner)` position, i.e. per token.

use crate::par;
use crate::real::Real;

#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl Layout {
    #[inline]
    fn at(&self, o: usize, c: usize, i: usize) -> usize {
        (o * self.channels + c) * self.inner + i
    }
}

pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance used for normalisation.
    pub var: Vec<T>,
}

pub fn batch_stats<T: Real>(l: Layout, x: &[T]) -> BatchStats<T> {
    let m = T::of_usize(l.outer * l.inner);
    let per_channel = par::map_range(l.channels, |c| {
        let mut s = T::zero();
        for o in 0..l.outer {
            for i in 0..l.inner {
                s += x[l.at(o, c, i)];
            }
        }
        let mean = s / m;
        let mut v = T::zero();
        for o in 0..l.outer {
            for i in 0..l.inner {
                let d = x[l.at(o, c, i)] - mean;
                v += d * d;
            }
        }
        (mean, v / m)
    });
    let (mean, var) = per_channel.into_iter().unzip();
    BatchStats { mean, var }
}

/// `y = (x − mean)·invstd·γ + β` per channel.
pub fn channel_affine<T: Real>(l: Layout, x: &[T], mean: &[T], invstd: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    let plane = l.channels * l.inner;
    par::for_each_chunk_mut_sized(&mut y, plane, x.len(), |o, yo| {
        for c in 0..l.channels {
            let (mu, s, ga, be) = (mean[c], invstd[c], gamma[c], beta[c]);
            for i in 0..l.inner {
                yo[c * l.inner + i] = (x[l.at(o, c, i)] - mu) * s * ga + be;
            }
        }
    });
    y
}

/// Backward of batch norm with batch statistics. Returns `(dx, dγ, dβ)`.
pub fn batch_norm_backward<T: Real>(
    l: Layout,
    x: &[T],
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
    dy: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::of_usize(l.outer * l.inner);
    let sums = par::map_range(l.channels, |c| {
        let mut sdy = T::zero();
        let mut sdy_xhat = T::zero();
        for o in 0..l.outer {
            for i in 0..l.inner {
                let k = l.at(o, c, i);
                let xhat = (x[k] - mean[c]) * invstd[c];
                sdy += dy[k];
                sdy_xhat += dy[k] * xhat;
            }
        }
        (sdy, sdy_xhat)
    });
    let dbeta: Vec<T> = sums.iter().map(|s| s.0).collect();
    let dgamma: Vec<T> = sums.iter().map(|s| s.1).collect();
    let mut dx = vec![T::zero(); x.len()];
    let plane = l.channels * l.inner;
    par::for_each_chunk_mut_sized(&mut dx, plane, x.len(), |o, dxo| {
        for c in 0..l.channels {
            let scale = gamma[c] * invstd[c];
            for i in 0..l.inner {
                let k = l.at(o, c, i);
                dxo[c * l.inner + i] = if batch_stats {
                    let xhat = (x[k] - mean[c]) * invstd[c];
                    scale * (dy[k] - dbeta[c] / m - xhat * dgamma[c] / m)
                } else {
                    scale * dy[k]
                };
            }
        }
    });
    (dx, dgamma, dbeta)
}

/// Layer norm forward. Returns `(y, mean, rstd)` with one statistic per token.
pub fn layer_norm<T: Real>(l: Layout, x: &[T], gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c_n = T::of_usize(l.channels);
    let tokens = l.outer * l.inner;
    let stats = par::map_range(tokens, |t| {
        let (o, i) = (t / l.inner, t % l.inner);
        let mut s = T::zero();
        for c in 0..l.channels {
            s += x[l.at(o, c, i)];
        }
        let mean = s / c_n;
        let mut v = T::zero();
        for c in 0..l.channels {
            let d = x[l.at(o, c, i)] - mean;
            v += d * d;
        }
        (mean, T::one() / (v / c_n + eps).sqrt())
    });
    let mut y = vec![T::zero(); x.len()];
    for o in 0..l.outer {
        for c in 0..l.channels {
            for i in 0..l.inner {
                let (mu, r) = stats[o * l.inner + i];
                let k = l.at(o, c, i);
                y[k] = (x[k] - mu) * r * gamma[c] + beta[c];
            }
        }
    }
    let (mean, rstd) = stats.into_iter().unzip();
    (y, mean, rstd)
}

pub fn layer_norm_backward<T: Real>(
    l: Layout,
    x: &[T],
    mean: &[T],
    rstd: &[T],
    gamma: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c_n = T::of_usize(l.channels);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); l.channels];
    let mut dbeta = vec![T::zero(); l.channels];
    for o in 0..l.outer {
        for i in 0..l.inner {
            let t = o * l.inner + i;
            let (mu, r) = (mean[t], rstd[t]);
            let mut s_g = T::zero();
            let mut s_gx = T::zero();
            for c in 0..l.channels {
                let k = l.at(o, c, i);
                let xhat = (x[k] - mu) * r;
                let g = dy[k] * gamma[c];
                s_g += g;
                s_gx += g * xhat;
                dgamma[c] += dy[k] * xhat;
                dbeta[c] += dy[k];
            }
            for c in 0..l.channels {
                let k = l.at(o, c, i);
                let xhat = (x[k] - mu) * r;
                let g = dy[k] * gamma[c];
                dx[k] = r * (g - s_g / c_n - xhat * s_gx / c_n);
            }
        }
    }
    (dx, dgamma, dbeta)
}
