mod common;

use common::*;
use proptest::prelude::*;
use visformer::fp16::{compare_modes, constant_qk, f16_round, reference_softmax, scores_f16, F16_MAX};
use visformer::{ScalingMode, Tensor};

/// Round-to-nearest-even onto the binary16 grid, from the format definition:
/// spacing `2^(e−10)` for normal `|x| ∈ [2^e, 2^(e+1))`, `2^−24` below
/// `2^−14`, and infinity from `65504 + 16` upwards.
fn rne_oracle(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let a = x.abs();
    let e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let quantum = if e < -14 { 2f64.powi(-24) } else { 2f64.powi(e - 10) };
    let r = (a / quantum).round_ties_even() * quantum;
    let r = if r > F16_MAX { f64::INFINITY } else { r };
    r.copysign(x)
}

#[test]
fn format_examples() {
    assert_eq!(f16_round(1.0).value(), 1.0);
    assert!(!f16_round(1.0).overflowed);
    assert_eq!(f16_round(65504.0).value(), 65504.0);
    let inf = f16_round(65536.0);
    assert!(inf.value().is_infinite() && inf.overflowed);
    assert_eq!(f16_round(-65536.0).value(), f64::NEG_INFINITY);
    assert_eq!(f16_round(1.0).bits, 0x3c00);
    assert_eq!(f16_round(F16_MAX).bits, 0x7bff);
}

#[test]
fn oracle_agrees_on_every_tie_between_neighbours() {
    // midpoints of consecutive positive finite half values
    let mut prev = 0.0f64;
    for bits in 1u16..0x7c00 {
        let v = half_from_bits(bits);
        let mid = 0.5 * (prev + v);
        assert_eq!(f16_round(mid).value(), rne_oracle(mid), "tie at {mid}");
        assert_eq!(f16_round(v).value(), v);
        prev = v;
    }
    // the tie above the largest finite value goes to infinity
    assert!(f16_round(65520.0).value().is_infinite());
    assert_eq!(f16_round(65519.996).value(), F16_MAX);
}

/// Decodes binary16 bits by hand.
fn half_from_bits(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let man = (bits & 0x3ff) as f64;
    sign * if exp == 0 {
        man * 2f64.powi(-24)
    } else {
        (1.0 + man / 1024.0) * 2f64.powi(exp - 15)
    }
}

#[test]
fn standard_overflows_at_d64_entries_32() {
    // 32·32·64 = 65536 in exact 64-bit arithmetic
    assert!(32.0f64 * 32.0 * 64.0 > F16_MAX);
    let (q, k) = constant_qk(4, 64, 32.0);
    let (logits, probs, rep) = scores_f16(&q, &k, ScalingMode::Standard).unwrap();
    assert!(rep.overflow_count > 0);
    assert!(!rep.softmax_valid && probs.is_none());
    assert!(logits.iter().any(|v| !v.is_finite()));
    assert!(rep.max_abs_logit.is_infinite());
}

#[test]
fn prenorm_survives_32_but_not_128() {
    let (q, k) = constant_qk(4, 64, 32.0);
    let (logits, _, rep) = scores_f16(&q, &k, ScalingMode::PreNorm).unwrap();
    assert_eq!(rep.overflow_count, 0);
    assert!(rep.softmax_valid);
    // (32/64^¼)²·64 = 8192 exactly, up to f16 rounding of 32/2√2
    assert!((logits[0] - 8192.0).abs() <= 16.0, "{}", logits[0]);
    let (q, k) = constant_qk(4, 64, 128.0);
    let (_, _, rep) = scores_f16(&q, &k, ScalingMode::PreNorm).unwrap();
    assert!(rep.overflow_count > 0 && !rep.softmax_valid);
}

#[test]
fn fullnorm_and_pb_relax_survive_both_instances() {
    for mag in [32.0, 128.0] {
        let (q, k) = constant_qk(4, 64, mag);
        for mode in [ScalingMode::FullNorm, ScalingMode::PbRelax { alpha: 32.0 }] {
            let (_, probs, rep) = scores_f16(&q, &k, mode).unwrap();
            assert_eq!(rep.overflow_count, 0, "{} at {mag}", mode.name());
            assert!(rep.softmax_valid && probs.is_some());
        }
    }
    let (q, k) = constant_qk(4, 64, 128.0);
    let (logits, _, _) = scores_f16(&q, &k, ScalingMode::FullNorm).unwrap();
    assert_eq!(logits[0], 16.0 * 16.0 * 64.0);
}

#[test]
fn compare_modes_small_inputs() {
    let mut r = rng(1);
    let q: Tensor<f64> = uniform(&mut r, &[6, 16], 1.0);
    let k: Tensor<f64> = uniform(&mut r, &[6, 16], 1.0);
    let reps = compare_modes(&q, &k, 32.0).unwrap();
    assert_eq!(reps.len(), 4);
    assert!(reps.iter().all(|r| r.softmax_valid && r.divergence_fullnorm.is_some()));
    let p = |m| scores_f16(&q, &k, m).unwrap().1.unwrap();
    let (ps, pp) = (p(ScalingMode::Standard), p(ScalingMode::PreNorm));
    assert!(max_abs_diff(&ps, &pp) < 1e-2);
    for rep in &reps {
        assert!(rep.divergence_same_mode.unwrap() < 1e-2, "{}", rep.mode);
    }
    // the full-norm reference is a flatter distribution than the standard one
    let full = reference_softmax(&q, &k, ScalingMode::FullNorm).unwrap();
    assert!(max_abs_diff(&full, &ps) > 0.0);
}

#[test]
fn crafted_overflow_compare() {
    let (q, k) = constant_qk(4, 64, 128.0);
    let reps = compare_modes(&q, &k, 32.0).unwrap();
    let by = |n: &str| reps.iter().find(|r| r.mode == n).unwrap();
    assert!(!by("standard").softmax_valid && by("standard").divergence_fullnorm.is_none());
    assert!(by("fullnorm").softmax_valid);
    assert!(by("pb_relax").softmax_valid);
}

#[test]
fn fullnorm_corner_overflows_through_partial_sum_rounding() {
    // Exact logit 255² = 65025 < 65504, but each scaled product rounds and
    // the running f16 sum drifts upwards by up to half a spacing per term.
    let (q, k) = constant_qk(1, 811, 255.0);
    let (s, _, rep) = scores_f16(&q, &k, ScalingMode::FullNorm).unwrap();
    assert!(255.0f64 * 255.0 < F16_MAX);
    assert!(rep.overflow_count > 0 && s[0].is_infinite());
    let (q, k) = constant_qk(1, 811, 254.0);
    let (_, _, rep) = scores_f16(&q, &k, ScalingMode::FullNorm).unwrap();
    assert_eq!(rep.overflow_count, 0);
}

#[test]
fn saturated_softmax_shift_is_not_an_overflow() {
    // logits ±40000 are finite; their difference rounds to −∞ and exp gives 0
    let q = Tensor::new(&[2, 1], vec![-200.0, 200.0]).unwrap();
    let k = Tensor::new(&[2, 1], vec![200.0, -200.0]).unwrap();
    let (s, probs, rep) = scores_f16(&q, &k, ScalingMode::Standard).unwrap();
    assert_eq!(s, [-40000.0, 40000.0, 40000.0, -40000.0]);
    assert_eq!(rep.overflow_count, 0);
    assert_eq!(probs.unwrap(), [0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn rejects_non_finite_and_mismatched_inputs() {
    let mut q = Tensor::<f64>::zeros(&[2, 4]);
    q.data_mut()[0] = f64::NAN;
    assert!(scores_f16(&q, &Tensor::zeros(&[2, 4]), ScalingMode::Standard).is_err());
    assert!(scores_f16(&Tensor::zeros(&[2, 4]), &Tensor::zeros(&[3, 4]), ScalingMode::Standard).is_err());
}

fn arb_finite() -> impl Strategy<Value = f64> {
    (any::<bool>(), -30i32..17, 0u64..(1 << 52)).prop_map(|(neg, e, m)| {
        let v = f64::from_bits(((1023 + e) as u64) << 52 | m);
        if neg {
            -v
        } else {
            v
        }
    })
}

fn box_qk(seed: u64, t: usize, d: usize, bound: f64) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    (uniform(&mut r, &[t, d], bound), uniform(&mut r, &[t, d], bound))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rounding_matches_independent_oracle(x in arb_finite()) {
        let s = f16_round(x);
        let o = rne_oracle(x);
        prop_assert_eq!(s.value(), o);
        prop_assert_eq!(s.overflowed, o.is_infinite());
        prop_assert!(!s.is_finite() || s.value().abs() <= F16_MAX);
    }

    #[test]
    fn fullnorm_never_overflows_in_random_box(seed in any::<u64>(), t in 1usize..4, d in 1usize..1025) {
        let (q, k) = box_qk(seed, t, d, 255.0);
        let (_, _, rep) = scores_f16(&q, &k, ScalingMode::FullNorm).unwrap();
        prop_assert_eq!(rep.overflow_count, 0);
    }

    #[test]
    fn standard_overflow_invalidates_softmax(seed in any::<u64>(), d in 1usize..128, mag in 1.0f64..200.0) {
        let (q, k) = box_qk(seed, 3, d, mag);
        let (_, probs, rep) = scores_f16(&q, &k, ScalingMode::Standard).unwrap();
        if rep.overflow_count > 0 {
            prop_assert!(!rep.softmax_valid && probs.is_none());
        }
    }

    #[test]
    fn scaling_up_never_clears_overflow(seed in any::<u64>(), d in 1usize..128, mag in 1.0f64..200.0, lambda in 1.0f64..8.0) {
        let (q, k) = box_qk(seed, 3, d, mag);
        let scale = |t: &Tensor<f64>| Tensor::from_fn(t.dims(), |i| t.data()[i] * lambda);
        for mode in ScalingMode::all(32.0) {
            let before = scores_f16(&q, &k, mode).unwrap().2;
            let after = scores_f16(&scale(&q), &scale(&k), mode).unwrap().2;
            if !before.softmax_valid {
                prop_assert!(!after.softmax_valid, "{} cleared by scaling {}", mode.name(), lambda);
            }
        }
    }

    #[test]
    fn standard_and_prenorm_agree_when_both_finite(seed in any::<u64>(), d in 1usize..64, mag in 0.01f64..4.0) {
        let (q, k) = box_qk(seed, 4, d, mag);
        let s = scores_f16(&q, &k, ScalingMode::Standard).unwrap().1;
        let p = scores_f16(&q, &k, ScalingMode::PreNorm).unwrap().1;
        if let (Some(s), Some(p)) = (s, p) {
            prop_assert!(max_abs_diff(&s, &p) < 1e-2);
        }
    }
}
