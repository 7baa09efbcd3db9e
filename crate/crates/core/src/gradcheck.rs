//! Central finite differences against the tape's analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, init_params};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// `(f(θ+h) − f(θ−h)) / 2h` for element `index` of parameter `path`.
/// The store is restored before returning.
pub fn finite_diff_grad<T, F>(mut f: F, store: &mut ParamStore<T>, path: &str, index: usize, h: f64) -> Result<f64>
where
    T: Real,
    F: FnMut(&ParamStore<T>) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("finite_diff_grad", format!("step must be positive, got {h}")));
    }
    let theta = store.element(path, index)?;
    store.set_element(path, index, T::of(theta.as_f64() + h))?;
    let plus = f(store);
    store.set_element(path, index, T::of(theta.as_f64() - h))?;
    let minus = f(store);
    store.set_element(path, index, theta)?;
    Ok((plus? - minus?) / (2.0 * h))
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Elements sampled per parameter tensor.
    pub samples_per_param: usize,
    pub seed: u64,
    /// Record the model in training mode (batch-norm batch statistics).
    pub training: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            samples_per_param: 4,
            seed: 0,
            training: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub path: String,
    pub checked: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Step multipliers tried in turn while an element is out of tolerance; the
/// smallest error is reported.
pub const STEP_REFINEMENTS: [f64; 3] = [1.0, 0.1, 0.01];

/// Hook applied to each analytic gradient before comparison.
pub type Fault<'a> = &'a dyn Fn(&str, &mut [f64]);

/// Checks every trainable parameter of `store`. `loss` records a scalar loss
/// on the given tape from the given parameters.
pub fn check_store<F>(
    store: &mut ParamStore<f64>,
    mut loss: F,
    opts: &GradCheckOptions,
    fault: Option<Fault<'_>>,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    {
        let mut tape = Tape::new();
        let l = loss(&mut tape, store)?;
        tape.backward_into(l, store)?;
    }
    let mut eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(&mut tape, s)?;
        Ok(tape.value(l).item())
    };
    let paths: Vec<String> = store.trainable().map(|(p, _)| p.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = Vec::with_capacity(paths.len());
    for path in paths {
        let t = store.get(&path)?;
        let n = t.numel();
        let mut grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        if let Some(f) = fault {
            f(&path, &mut grad);
        }
        let mut idx = sample(&mut rng, n, opts.samples_per_param.min(n)).into_vec();
        idx.sort_unstable();
        let mut check = ParamCheck {
            path: path.clone(),
            checked: idx.len(),
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            max_rel_err: -1.0,
            passed: true,
        };
        for i in idx {
            let (mut numeric, mut err) = (0.0, f64::INFINITY);
            for refine in STEP_REFINEMENTS {
                let n = finite_diff_grad(&mut eval, store, &path, i, opts.step * refine)?;
                let e = relative_error(grad[i], n, opts.floor);
                if e < err {
                    (numeric, err) = (n, e);
                }
                if err <= opts.tolerance {
                    break;
                }
            }
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = grad[i];
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_err <= opts.tolerance;
        params.push(check);
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        params,
    })
}

/// Checks every parameter of a freshly built `cfg` in f64, using the
/// cross-entropy of a seeded random batch of `batch` images.
pub fn check_model(cfg: &ModelConfig, batch: usize, opts: &GradCheckOptions, fault: Option<Fault<'_>>) -> Result<GradCheckReport> {
    let mut store = init_params(cfg, opts.seed)?.cast::<f64>();
    let r = cfg.input_resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xda7a);
    let x = Tensor::from_fn(&[batch, cfg.in_channels, r, r], |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.num_classes).collect();
    check_store(
        &mut store,
        |tape, s| {
            let xv = tape.constant(x.clone());
            let logits = forward_on_tape(cfg, s, tape, xv, opts.training)?;
            tape.cross_entropy(logits, &labels)
        },
        opts,
        fault,
    )
}
