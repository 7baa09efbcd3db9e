//! Software IEEE binary16 evaluation of attention scores.
//!
//! Every intermediate is rounded to half precision with round-to-nearest-even:
//! the scaled Q and K entries, each product, each partial sum of the dot
//! product (accumulated in ascending index order), each division, and every
//! softmax step. Real hardware often accumulates in f32; that is deliberately
//! not modelled here.

use half::f16;
use serde::Serialize;

use crate::attention::ScalingMode;
use crate::error::{Error, Result};
use crate::kernels::attention::head_logits;
use crate::kernels::pointwise::softmax_rows;
use crate::tensor::Tensor;

/// Largest finite half value.
pub const F16_MAX: f64 = 65504.0;
/// Smallest positive normal half value, 2⁻¹⁴.
pub const F16_MIN_NORMAL: f64 = 6.103_515_625e-5;

/// A half-precision value and how rounding produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct F16Sample {
    pub bits: u16,
    /// A finite input rounded to ±infinity.
    pub overflowed: bool,
    /// A nonzero input rounded into the subnormal range or to zero.
    pub underflowed: bool,
}

impl F16Sample {
    pub fn value(&self) -> f64 {
        f16::from_bits(self.bits).to_f64()
    }

    pub fn is_finite(&self) -> bool {
        f16::from_bits(self.bits).is_finite()
    }
}

/// Rounds `x` to the nearest half value, ties to even.
pub fn f16_round(x: f64) -> F16Sample {
    let h = f16::from_f64(x);
    let r = h.to_f64();
    F16Sample {
        bits: h.to_bits(),
        overflowed: x.is_finite() && r.is_infinite(),
        underflowed: x != 0.0 && x.is_finite() && r.abs() < F16_MIN_NORMAL,
    }
}

/// Half-precision arithmetic with overflow and underflow tallies. Each
/// operation is evaluated exactly (or correctly rounded) in f64 and then
/// rounded once; f64 carries more than twice the bits of f16 plus two, so
/// the result equals a correctly rounded f16 operation.
#[derive(Clone, Debug, Default)]
pub struct F16Arith {
    pub overflows: usize,
    pub underflows: usize,
}

impl F16Arith {
    pub fn round(&mut self, x: f64) -> f64 {
        let s = f16_round(x);
        self.overflows += usize::from(s.overflowed);
        self.underflows += usize::from(s.underflowed);
        s.value()
    }

    pub fn add(&mut self, a: f64, b: f64) -> f64 {
        self.round(a + b)
    }

    pub fn sub(&mut self, a: f64, b: f64) -> f64 {
        self.round(a - b)
    }

    pub fn mul(&mut self, a: f64, b: f64) -> f64 {
        self.round(a * b)
    }

    pub fn div(&mut self, a: f64, b: f64) -> f64 {
        self.round(a / b)
    }

    pub fn exp(&mut self, a: f64) -> f64 {
        self.round(a.exp())
    }

    /// Sequential ascending-index dot product.
    pub fn dot(&mut self, a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            let p = self.mul(x, y);
            acc = self.add(acc, p);
        }
        acc
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OverflowReport {
    pub mode: String,
    pub d: usize,
    pub tokens: usize,
    /// Largest `|entry|` of Q and K.
    pub magnitude: f64,
    pub overflow_count: usize,
    pub underflow_count: usize,
    /// Largest `|logit|`; infinite when a logit overflowed.
    pub max_abs_logit: f64,
    /// All logits and the softmax came out finite.
    pub softmax_valid: bool,
    /// Max abs difference to the f64 softmax of the same mode.
    pub divergence_same_mode: Option<f64>,
    /// Max abs difference to the f64 softmax of full-norm logits.
    pub divergence_fullnorm: Option<f64>,
}

fn check_qk(q: &Tensor<f64>, k: &Tensor<f64>) -> Result<(usize, usize)> {
    const OP: &str = "scores_f16";
    if q.rank() != 2 {
        return Err(Error::dim(OP, "Q rank", 2, q.rank()));
    }
    k.ensure_dims(OP, "K", q.dims())?;
    if !q.is_finite() || !k.is_finite() {
        return Err(Error::NonFinite {
            op: "scores_f16 (input)",
            layer: None,
        });
    }
    Ok((q.dims()[0], q.dims()[1]))
}

/// Logits of `Q, K [T, d]` for `mode`, evaluated entirely in half precision.
/// Returns the `T×T` logits (possibly infinite) and the overflow report;
/// `probs` is filled with the half-precision softmax when the logits are finite.
/// Overflow and underflow counts cover the score computation only.
pub fn scores_f16(q: &Tensor<f64>, k: &Tensor<f64>, mode: ScalingMode) -> Result<(Vec<f64>, Option<Vec<f64>>, OverflowReport)> {
    let (t, d) = check_qk(q, k)?;
    let mut ar = F16Arith::default();
    let qh: Vec<f64> = q.data().iter().map(|&v| ar.round(v)).collect();
    let kh: Vec<f64> = k.data().iter().map(|&v| ar.round(v)).collect();
    let row = |m: &[f64], i: usize| m[i * d..(i + 1) * d].to_vec();
    let df = d as f64;
    let mut s = vec![0.0; t * t];
    match mode {
        ScalingMode::Standard => {
            let r = ar.round(df.sqrt());
            for i in 0..t {
                for j in 0..t {
                    let dot = ar.dot(&row(&qh, i), &row(&kh, j));
                    s[i * t + j] = ar.div(dot, r);
                }
            }
        }
        ScalingMode::PreNorm | ScalingMode::FullNorm => {
            let r = ar.round(if mode == ScalingMode::PreNorm { df.powf(0.25) } else { df.sqrt() });
            let qs: Vec<f64> = qh.iter().map(|&v| ar.div(v, r)).collect();
            let ks: Vec<f64> = kh.iter().map(|&v| ar.div(v, r)).collect();
            for i in 0..t {
                for j in 0..t {
                    s[i * t + j] = ar.dot(&row(&qs, i), &row(&ks, j));
                }
            }
        }
        ScalingMode::PbRelax { alpha } => {
            let a = ar.round(alpha);
            let r = ar.round(alpha * df.sqrt());
            let qs: Vec<f64> = qh.iter().map(|&v| ar.div(v, r)).collect();
            for i in 0..t {
                for j in 0..t {
                    s[i * t + j] = ar.dot(&row(&qs, i), &row(&kh, j));
                }
                let m = s[i * t..(i + 1) * t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for j in 0..t {
                    let shifted = ar.sub(s[i * t + j], m);
                    s[i * t + j] = ar.mul(shifted, a);
                }
            }
        }
    }
    let logits_finite = s.iter().all(|v| v.is_finite());
    // a shift `s − max` that saturates to −∞ still yields the exact exp of 0,
    // so the softmax stage keeps its own tallies
    let probs = logits_finite.then(|| softmax_f16(&mut F16Arith::default(), t, &s));
    let probs = probs.filter(|p| p.iter().all(|v| v.is_finite()));
    let magnitude = q
        .data()
        .iter()
        .chain(k.data())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let max_abs_logit = s.iter().fold(0.0f64, |m, &v| if v.is_nan() { f64::INFINITY } else { m.max(v.abs()) });
    let report = OverflowReport {
        mode: mode.name().to_string(),
        d,
        tokens: t,
        magnitude,
        overflow_count: ar.overflows,
        underflow_count: ar.underflows,
        max_abs_logit,
        softmax_valid: probs.is_some(),
        divergence_same_mode: None,
        divergence_fullnorm: None,
    };
    Ok((s, probs, report))
}

/// Row softmax with max subtraction, every step in half precision.
fn softmax_f16(ar: &mut F16Arith, t: usize, s: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; s.len()];
    for (srow, prow) in s.chunks(t).zip(p.chunks_mut(t)) {
        let m = srow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (pv, &sv) in prow.iter_mut().zip(srow) {
            let z = ar.sub(sv, m);
            *pv = ar.exp(z);
            sum = ar.add(sum, *pv);
        }
        for pv in prow.iter_mut() {
            *pv = ar.div(*pv, sum);
        }
    }
    p
}

/// Softmax of `mode` logits in f64.
pub fn reference_softmax(q: &Tensor<f64>, k: &Tensor<f64>, mode: ScalingMode) -> Result<Vec<f64>> {
    let (t, d) = check_qk(q, k)?;
    let mut s = vec![0.0; t * t];
    head_logits(mode, t, d, q.data(), k.data(), &mut s);
    softmax_rows(t, &mut s);
    Ok(s)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One report per scaling mode, with divergences from f64 references.
pub fn compare_modes(q: &Tensor<f64>, k: &Tensor<f64>, alpha: f64) -> Result<Vec<OverflowReport>> {
    let full_ref = reference_softmax(q, k, ScalingMode::FullNorm)?;
    ScalingMode::all(alpha)
        .into_iter()
        .map(|mode| {
            let (_, probs, mut rep) = scores_f16(q, k, mode)?;
            if let Some(p) = probs {
                let same = reference_softmax(q, k, mode)?;
                rep.divergence_same_mode = Some(max_abs_diff(&p, &same));
                rep.divergence_fullnorm = Some(max_abs_diff(&p, &full_ref));
            }
            Ok(rep)
        })
        .collect()
}

/// `T × d` matrices with every entry equal to `magnitude`.
pub fn constant_qk(tokens: usize, d: usize, magnitude: f64) -> (Tensor<f64>, Tensor<f64>) {
    let q = Tensor::full(&[tokens, d], magnitude);
    (q.clone(), q)
}
