#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visformer::autograd::{Tape, Var};
use visformer::gradcheck::{check_store, GradCheckOptions, GradCheckReport};
use visformer::{ParamStore, Real, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Real>(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::of(rng.random_range(-scale..scale)))
}

/// Direct-loop grouped cross-correlation, `x[N,Cin,H,W]`, `w[Cout,Cin/g,kh,kw]`.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize, pad: usize, groups: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = x.nchw();
    let (cout, cin_g, kh, kw) = w.nchw();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;
    assert_eq!(cin_g * groups, cin);
    let mut out = vec![0.0; n * cout * oh * ow];
    for i in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((i * cin + g * cin_g + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((co * cin_g + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((i * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

/// `x[M, Din] · wᵀ + b` by explicit loops.
pub fn naive_linear(x: &[f64], m: usize, din: usize, w: &[f64], dout: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut y = vec![0.0; m * dout];
    for i in 0..m {
        for o in 0..dout {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for k in 0..din {
                acc += x[i * din + k] * w[o * din + k];
            }
            y[i * dout + o] = acc;
        }
    }
    y
}

pub fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

/// Gradient check of `f` over every element of every tensor in `inputs`,
/// through the scalar `Σ f(inputs) ⊙ R` with a fixed random `R`.
pub fn gradcheck_op<F>(inputs: &[(&str, Tensor<f64>)], seed: u64, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> visformer::Result<Var>,
{
    let mut store = ParamStore::new();
    for (p, t) in inputs {
        store.insert(*p, t.clone().with_requires_grad(true)).unwrap();
    }
    let names: Vec<String> = inputs.iter().map(|(p, _)| p.to_string()).collect();
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = names.iter().map(|p| tape.param(&store, p).unwrap()).collect();
        let y = f(&mut tape, &vars).unwrap();
        tape.dims(y).to_vec()
    };
    let mut r = rng(seed ^ 0x77);
    let weights: Tensor<f64> = uniform(&mut r, &probe, 1.0);
    let opts = GradCheckOptions {
        samples_per_param: usize::MAX,
        ..GradCheckOptions::default()
    };
    check_store(
        &mut store,
        |tape, s| {
            let vars: Vec<Var> = names.iter().map(|p| tape.param(s, p)).collect::<visformer::Result<_>>()?;
            let y = f(tape, &vars)?;
            let w = tape.constant(weights.clone());
            let prod = tape.mul(y, w)?;
            tape.sum(prod)
        },
        &opts,
        None,
    )
    .unwrap()
}

pub fn assert_passes(name: &str, r: &GradCheckReport) {
    for p in &r.params {
        assert!(
            p.passed,
            "{name}: `{}` rel err {:.3e} (analytic {:e}, numeric {:e})",
            p.path, p.max_rel_err, p.analytic, p.numeric
        );
    }
}
