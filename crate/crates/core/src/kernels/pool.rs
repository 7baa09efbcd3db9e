use crate::real::Real;

/// Max pooling with implicit `-inf` padding. Returns the output and, for each
/// output element, the flat input index it was taken from.
#[allow(clippy::too_many_arguments)]
pub fn max_pool<T: Real>(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &[T],
) -> (Vec<T>, Vec<usize>) {
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut arg = vec![0usize; out.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

/// Mean over the trailing `spatial` elements of each `(n, c)` plane.
///
/// Each plane is summed in sorted order, which makes the result exactly
/// invariant to any permutation of spatial positions.
pub fn global_avg_pool<T: Real>(planes: usize, spatial: usize, x: &[T]) -> Vec<T> {
    let inv = T::one() / T::of_usize(spatial);
    let mut buf = Vec::with_capacity(spatial);
    x.chunks(spatial)
        .take(planes)
        .map(|p| {
            buf.clear();
            buf.extend_from_slice(p);
            buf.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            buf.iter().copied().sum::<T>() * inv
        })
        .collect()
}
