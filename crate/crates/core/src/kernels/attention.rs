//! Per-head scaled dot-product attention over a packed `qkv[N, 3A, T]`
//! tensor, where `A = heads·head_dim` and channel `h·d + e` of each third
//! holds head `h`, component `e`.

use super::gemm::{gemm, gemm_nt, gemm_tn};
use super::pointwise::softmax_rows;
use crate::attention::ScalingMode;
use crate::par;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub n: usize,
    pub heads: usize,
    pub tokens: usize,
    pub head_dim: usize,
}

impl AttnGeom {
    pub fn attn_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Multiply-accumulates of `QKᵀ` and `P·V` for the batch.
    pub fn macs(&self) -> u64 {
        (2 * self.n * self.heads * self.tokens * self.tokens * self.head_dim) as u64
    }
}

/// Logits `S[T×T]` for one head from row-major `q, k [T×d]`, computed the
/// way `mode` prescribes (each scaling applied where the formula puts it).
pub fn head_logits<T: Real>(mode: ScalingMode, t: usize, d: usize, q: &[T], k: &[T], s: &mut [T]) {
    let df = d as f64;
    match mode {
        ScalingMode::Standard => {
            gemm_nt(t, t, d, q, k, s, false);
            let sd = T::of(df.sqrt());
            s.iter_mut().for_each(|v| *v /= sd);
        }
        ScalingMode::PreNorm => {
            let r = T::of(df.powf(0.25));
            let qs: Vec<T> = q.iter().map(|&v| v / r).collect();
            let ks: Vec<T> = k.iter().map(|&v| v / r).collect();
            gemm_nt(t, t, d, &qs, &ks, s, false);
        }
        ScalingMode::FullNorm => {
            let r = T::of(df.sqrt());
            let qs: Vec<T> = q.iter().map(|&v| v / r).collect();
            let ks: Vec<T> = k.iter().map(|&v| v / r).collect();
            gemm_nt(t, t, d, &qs, &ks, s, false);
        }
        ScalingMode::PbRelax { alpha } => {
            let r = T::of(alpha * df.sqrt());
            let qs: Vec<T> = q.iter().map(|&v| v / r).collect();
            gemm_nt(t, t, d, &qs, k, s, false);
            let a = T::of(alpha);
            for row in s.chunks_mut(t) {
                let m = row.iter().fold(T::neg_infinity(), |x, &y| x.max(y));
                row.iter_mut().for_each(|v| *v = (*v - m) * a);
            }
        }
    }
}

/// Effective factor `c` in `S = c·QKᵀ (+ row shift)`; the shift has no
/// effect on the softmax gradient.
pub fn logit_scale(mode: ScalingMode, d: usize) -> f64 {
    match mode {
        ScalingMode::FullNorm => 1.0 / d as f64,
        _ => 1.0 / (d as f64).sqrt(),
    }
}

fn gather_head<T: Real>(g: &AttnGeom, qkv_n: &[T], part: usize, h: usize, out: &mut [T]) {
    let (t, d, a) = (g.tokens, g.head_dim, g.attn_dim());
    for e in 0..d {
        let ch = &qkv_n[(part * a + h * d + e) * t..(part * a + h * d + e + 1) * t];
        for (tok, &v) in ch.iter().enumerate() {
            out[tok * d + e] = v;
        }
    }
}

fn scatter_head<T: Real>(g: &AttnGeom, src: &[T], part: usize, h: usize, out_n: &mut [T]) {
    let (t, d, a) = (g.tokens, g.head_dim, g.attn_dim());
    for e in 0..d {
        let ch = &mut out_n[(part * a + h * d + e) * t..(part * a + h * d + e + 1) * t];
        for (tok, v) in ch.iter_mut().enumerate() {
            *v = src[tok * d + e];
        }
    }
}

/// Returns `(out[N, A, T], probs[N, heads, T, T])`. `bias`, when present, is
/// `[heads, T, T]` and is added to the logits before the softmax.
pub fn forward<T: Real>(g: &AttnGeom, mode: ScalingMode, qkv: &[T], bias: Option<&[T]>) -> (Vec<T>, Vec<T>) {
    let (t, d, a) = (g.tokens, g.head_dim, g.attn_dim());
    let per_head = par::map_range(g.n * g.heads, |nh| {
        let (n, h) = (nh / g.heads, nh % g.heads);
        let qkv_n = &qkv[n * 3 * a * t..(n + 1) * 3 * a * t];
        let mut q = vec![T::zero(); t * d];
        let mut k = vec![T::zero(); t * d];
        let mut v = vec![T::zero(); t * d];
        gather_head(g, qkv_n, 0, h, &mut q);
        gather_head(g, qkv_n, 1, h, &mut k);
        gather_head(g, qkv_n, 2, h, &mut v);
        let mut p = vec![T::zero(); t * t];
        head_logits(mode, t, d, &q, &k, &mut p);
        if let Some(b) = bias {
            let bh = &b[h * t * t..(h + 1) * t * t];
            p.iter_mut().zip(bh).for_each(|(x, &y)| *x += y);
        }
        softmax_rows(t, &mut p);
        let mut o = vec![T::zero(); t * d];
        gemm(t, d, t, &p, &v, &mut o, false);
        (o, p)
    });
    let mut out = vec![T::zero(); g.n * a * t];
    let mut probs = Vec::with_capacity(g.n * g.heads * t * t);
    for (nh, (o, p)) in per_head.into_iter().enumerate() {
        let (n, h) = (nh / g.heads, nh % g.heads);
        scatter_head(g, &o, 0, h, &mut out[n * a * t..(n + 1) * a * t]);
        probs.extend_from_slice(&p);
    }
    (out, probs)
}

/// Gradients `(dqkv, dbias)` where `dbias` is summed over the batch.
pub fn backward<T: Real>(
    g: &AttnGeom,
    mode: ScalingMode,
    qkv: &[T],
    probs: &[T],
    dout: &[T],
    want_bias: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let (t, d, a) = (g.tokens, g.head_dim, g.attn_dim());
    let c = T::of(logit_scale(mode, d));
    let per_head = par::map_range(g.n * g.heads, |nh| {
        let (n, h) = (nh / g.heads, nh % g.heads);
        let qkv_n = &qkv[n * 3 * a * t..(n + 1) * 3 * a * t];
        let mut q = vec![T::zero(); t * d];
        let mut k = vec![T::zero(); t * d];
        let mut v = vec![T::zero(); t * d];
        let mut dout_h = vec![T::zero(); t * d];
        gather_head(g, qkv_n, 0, h, &mut q);
        gather_head(g, qkv_n, 1, h, &mut k);
        gather_head(g, qkv_n, 2, h, &mut v);
        gather_head(g, &dout[n * a * t..(n + 1) * a * t], 0, h, &mut dout_h);
        let p = &probs[nh * t * t..(nh + 1) * t * t];

        let mut dv = vec![T::zero(); t * d];
        gemm_tn(t, d, t, p, &dout_h, &mut dv, false);
        let mut ds = vec![T::zero(); t * t];
        gemm_nt(t, t, d, &dout_h, &v, &mut ds, false);
        for (ds_row, p_row) in ds.chunks_mut(t).zip(p.chunks(t)) {
            let dot: T = ds_row.iter().zip(p_row).map(|(&x, &y)| x * y).sum();
            ds_row
                .iter_mut()
                .zip(p_row)
                .for_each(|(x, &y)| *x = y * (*x - dot));
        }
        let mut dq = vec![T::zero(); t * d];
        gemm(t, d, t, &ds, &k, &mut dq, false);
        let mut dk = vec![T::zero(); t * d];
        gemm_tn(t, d, t, &ds, &q, &mut dk, false);
        dq.iter_mut().for_each(|x| *x *= c);
        dk.iter_mut().for_each(|x| *x *= c);
        (dq, dk, dv, ds)
    });
    let mut dqkv = vec![T::zero(); qkv.len()];
    let mut dbias = want_bias.then(|| vec![T::zero(); g.heads * t * t]);
    for (nh, (dq, dk, dv, ds)) in per_head.into_iter().enumerate() {
        let (n, h) = (nh / g.heads, nh % g.heads);
        let out_n = &mut dqkv[n * 3 * a * t..(n + 1) * 3 * a * t];
        scatter_head(g, &dq, 0, h, out_n);
        scatter_head(g, &dk, 1, h, out_n);
        scatter_head(g, &dv, 2, h, out_n);
        if let Some(db) = dbias.as_mut() {
            db[h * t * t..(h + 1) * t * t]
                .iter_mut()
                .zip(&ds)
                .for_each(|(x, &y)| *x += y);
        }
    }
    (dqkv, dbias)
}
