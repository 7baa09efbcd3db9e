//! Desk-scale training loop with SGD-momentum or AdamW and a cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::config::ModelConfig;
use crate::model::{features_on_tape, forward_on_tape, Model};
use crate::params::ParamStore;
use crate::presets::preset;
use crate::tensor::Tensor;

/// Batch size the base learning rates refer to.
pub const REFERENCE_BATCH: usize = 512;
/// Final learning rate at the reference batch size.
pub const LR_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdamW,
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Learning rate at batch size 512; scaled linearly with `batch_size`.
    pub base_lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub seed: u64,
    #[serde(default)]
    pub data: SynthSpec,
    #[serde(default)]
    pub flip: bool,
    #[serde(default)]
    pub crop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: "visformer_ti-micro".into(),
            epochs: 20,
            batch_size: 50,
            optimizer: OptimizerKind::SgdMomentum,
            base_lr: 0.2,
            weight_decay: 5e-4,
            momentum: 0.9,
            seed: 0,
            data: SynthSpec::default(),
            flip: false,
            crop: false,
        }
    }
}

impl TrainConfig {
    /// A zero `base_lr` is accepted and freezes every parameter.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::config("train", msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad("base_lr must be finite and non-negative");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule::new(self.base_lr, self.batch_size, self.epochs)
    }
}

/// Per-epoch cosine decay from the scaled base rate to the scaled floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub start: f64,
    pub floor: f64,
    pub epochs: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, batch_size: usize, epochs: usize) -> Self {
        let k = batch_size as f64 / REFERENCE_BATCH as f64;
        let start = base_lr * k;
        Self {
            start,
            floor: (LR_FLOOR * k).min(start),
            epochs,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.start;
        }
        let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        if t >= 1.0 {
            return self.floor;
        }
        self.floor + (self.start - self.floor) * 0.5 * (1.0 + (PI * t).cos())
    }
}

/// Slot tensors per parameter path; `step` counts AdamW updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// Keyed `"{slot}/{path}"` with slot `momentum`, `exp_avg` or `exp_avg_sq`.
    pub state: BTreeMap<String, Tensor<f32>>,
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            momentum,
            weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    fn slot(&mut self, slot: &str, path: &str, n: usize) -> &mut Tensor<f32> {
        self.state
            .entry(format!("{slot}/{path}"))
            .or_insert_with(|| Tensor::zeros(&[n]))
    }

    /// Applies one update from the gradients accumulated in `store`. Weight
    /// decay touches only weights of rank two or more.
    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        self.step += 1;
        let (b1, b2) = ADAM_BETAS;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (path, p) in store.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.grad().map(<[f32]>::to_vec) else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: "optimizer (gradient)",
                    layer: Some(path.to_string()),
                });
            }
            let wd = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let n = p.numel();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let mu = self.momentum;
                    let mut v = self.slot("momentum", path, n).data().to_vec();
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(&g).zip(v.iter_mut()) {
                        let d = gi as f64 + wd * *w as f64;
                        *vi = (mu * *vi as f64 + d) as f32;
                        *w = (*w as f64 - lr * *vi as f64) as f32;
                    }
                    self.slot("momentum", path, n).data_mut().copy_from_slice(&v);
                }
                OptimizerKind::AdamW => {
                    let mut m = self.slot("exp_avg", path, n).data().to_vec();
                    let mut s = self.slot("exp_avg_sq", path, n).data().to_vec();
                    for (((w, &gi), mi), si) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(s.iter_mut()) {
                        let gi = gi as f64;
                        *mi = (b1 * *mi as f64 + (1.0 - b1) * gi) as f32;
                        *si = (b2 * *si as f64 + (1.0 - b2) * gi * gi) as f32;
                        let mhat = *mi as f64 / bc1;
                        let shat = *si as f64 / bc2;
                        let wv = *w as f64;
                        *w = (wv - lr * (mhat / (shat.sqrt() + ADAM_EPS) + wd * wv)) as f32;
                    }
                    self.slot("exp_avg", path, n).data_mut().copy_from_slice(&m);
                    self.slot("exp_avg_sq", path, n).data_mut().copy_from_slice(&s);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy over the epoch's training batches.
    pub loss: f64,
    /// Fraction of training samples classified correctly during the epoch.
    pub accuracy: f64,
}

/// Everything needed to continue a run at `next_epoch`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub next_epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub optimizer: Optimizer,
}

/// Seeded RNG for one epoch's shuffle and augmentation, independent of
/// what earlier epochs consumed.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// The sample order of `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> (Vec<usize>, ChaCha8Rng) {
    let mut rng = epoch_rng(seed, epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    (idx, rng)
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.dims()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// A source of labelled training batches.
pub trait Samples {
    fn num_samples(&self) -> usize;

    /// Inputs and labels of the given samples. `aug` carries the epoch RNG and
    /// the flip and crop switches.
    fn batch(&self, idx: &[usize], aug: Option<(&mut ChaCha8Rng, bool, bool)>) -> Result<(Tensor<f32>, Vec<usize>)>;
}

impl Samples for Dataset {
    fn num_samples(&self) -> usize {
        self.len()
    }

    fn batch(&self, idx: &[usize], aug: Option<(&mut ChaCha8Rng, bool, bool)>) -> Result<(Tensor<f32>, Vec<usize>)> {
        Dataset::batch(self, idx, aug)
    }
}

/// Precomputed `[N, C]` feature vectors with labels; augmentation is ignored.
#[derive(Clone, Debug)]
pub struct Features {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Samples for Features {
    fn num_samples(&self) -> usize {
        self.labels.len()
    }

    fn batch(&self, idx: &[usize], _aug: Option<(&mut ChaCha8Rng, bool, bool)>) -> Result<(Tensor<f32>, Vec<usize>)> {
        let c = self.x.dims()[1];
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&self.x.data()[i * c..(i + 1) * c]);
        }
        Ok((Tensor::new(&[idx.len(), c], out)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Forward used by [`fit`]: `(tape, store, input, training) -> logits`.
pub type ForwardFn<'a> = dyn Fn(&mut Tape<f32>, &ParamStore<f32>, Var, bool) -> Result<Var> + 'a;

/// Trains `store` from `state.next_epoch` up to (excluding) `until`, calling
/// `log` after each epoch. Batch-norm running statistics are written back
/// after every step.
pub fn fit(
    store: &mut ParamStore<f32>,
    forward: &ForwardFn<'_>,
    data: &dyn Samples,
    state: &mut TrainState,
    until: usize,
    log: &mut dyn FnMut(&EpochMetrics),
) -> Result<()> {
    let cfg = state.config.clone();
    cfg.validate()?;
    let sched = cfg.schedule();
    for epoch in state.next_epoch..until.min(cfg.epochs) {
        let lr = sched.lr(epoch);
        let n = data.num_samples();
        let (order, mut rng) = epoch_order(cfg.seed, epoch, n);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let aug = (cfg.flip || cfg.crop).then_some((&mut rng, cfg.flip, cfg.crop));
            let (x, labels) = data.batch(idx, aug)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let logits = forward(&mut tape, store, xv, true)?;
            tape.set_layer("loss");
            let loss = tape.cross_entropy(logits, &labels)?;
            loss_sum += tape.value(loss).item() as f64 * idx.len() as f64;
            correct += count_correct(tape.value(logits), &labels);
            store.zero_grad();
            tape.backward_into(loss, store)?;
            state.optimizer.step(store, lr)?;
            apply_running_updates(store, &mut tape)?;
        }
        let m = EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        };
        log(&m);
        state.history.push(m);
        state.next_epoch = epoch + 1;
    }
    store.zero_grad();
    Ok(())
}

/// Writes queued batch-norm running statistics back into `store`.
pub fn apply_running_updates(store: &mut ParamStore<f32>, tape: &mut Tape<f32>) -> Result<()> {
    for upd in tape.take_running_updates() {
        store
            .get_mut(&format!("{}.running_mean", upd.prefix))?
            .data_mut()
            .copy_from_slice(&upd.mean);
        store
            .get_mut(&format!("{}.running_var", upd.prefix))?
            .data_mut()
            .copy_from_slice(&upd.var);
    }
    Ok(())
}

/// Loss and accuracy of `store` over `data` in eval mode.
pub fn evaluate(store: &ParamStore<f32>, forward: &ForwardFn<'_>, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(idx, None)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let logits = forward(&mut tape, store, xv, false)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        loss_sum += tape.value(loss).item() as f64 * idx.len() as f64;
        correct += count_correct(tape.value(logits), &labels);
    }
    Ok((loss_sum / data.len() as f64, correct as f64 / data.len() as f64))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub state: TrainState,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.state.history.last()
    }
}

/// Fresh state for `cfg` at epoch zero.
pub fn new_state(cfg: &TrainConfig) -> TrainState {
    TrainState {
        config: cfg.clone(),
        next_epoch: 0,
        history: Vec::new(),
        optimizer: Optimizer::new(cfg.optimizer, cfg.momentum, cfg.weight_decay),
    }
}

/// Builds the preset of `cfg` (seeded by `cfg.seed`) and trains it on the
/// synthetic data, or continues `resume` when given.
pub fn train(cfg: &TrainConfig, resume: Option<(Model, TrainState)>, log: &mut dyn FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    train_until(cfg, resume, cfg.epochs, log)
}

/// [`train`], stopping once epoch `until` would start. The schedule still
/// spans `cfg.epochs`, so a later resume continues the same run.
pub fn train_until(
    cfg: &TrainConfig,
    resume: Option<(Model, TrainState)>,
    until: usize,
    log: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut model, mut state) = match resume {
        Some((m, s)) => {
            if s.config != *cfg {
                return Err(Error::config("train", "resume state was produced by a different train config"));
            }
            (m, s)
        }
        None => {
            let mc = preset(&cfg.preset)?;
            if mc.input_resolution != cfg.data.resolution || mc.num_classes != cfg.data.classes {
                return Err(Error::config(
                    "train.data",
                    format!(
                        "preset expects {}×{} input and {} classes, data has {} and {}",
                        mc.input_resolution, mc.input_resolution, mc.num_classes, cfg.data.resolution, cfg.data.classes
                    ),
                ));
            }
            (Model::build(mc, cfg.seed)?, new_state(cfg))
        }
    };
    let data = crate::data::synth_dataset(&cfg.data)?;
    let mc = model.config.clone();
    let forward = move |tape: &mut Tape<f32>, store: &ParamStore<f32>, x: Var, training: bool| {
        forward_on_tape(&mc, store, tape, x, training)
    };
    fit(&mut model.params, &forward, &data, &mut state, until, log)?;
    let (eval_loss, eval_accuracy) = evaluate(&model.params, &forward, &data, cfg.batch_size)?;
    Ok(TrainOutcome {
        model,
        state,
        eval_loss,
        eval_accuracy,
    })
}

/// Eval-mode classifier features of `store` for every sample of `data`.
pub fn extract_features(cfg: &ModelConfig, store: &ParamStore<f32>, data: &Dataset, batch_size: usize) -> Result<Features> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::new();
    let mut c = 0;
    for idx in all.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(idx, None)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let f = features_on_tape(cfg, store, &mut tape, xv, false)?;
        c = tape.dims(f)[1];
        out.extend_from_slice(tape.value(f).data());
    }
    Ok(Features {
        x: Tensor::new(&[data.len(), c], out)?,
        labels: data.labels.clone(),
    })
}

/// Linear probe: the preset of `cfg` is built from `cfg.seed` and frozen, and
/// only its classifier is trained on the pooled features, with the same
/// optimizer, schedule and sample order as `cfg`. Returns the probe's history.
pub fn linear_probe(cfg: &TrainConfig, data: &Dataset) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let model = Model::build(preset(&cfg.preset)?, cfg.seed)?;
    let feats = extract_features(&model.config, &model.params, data, cfg.batch_size)?;
    let mut store = ParamStore::new();
    for p in ["head.weight", "head.bias"] {
        store.insert(p, model.params.get(p)?.clone())?;
    }
    let forward = |tape: &mut Tape<f32>, store: &ParamStore<f32>, x: Var, _training: bool| {
        let w = tape.param(store, "head.weight")?;
        let b = tape.param(store, "head.bias")?;
        tape.linear(x, w, Some(b))
    };
    let mut state = new_state(cfg);
    fit(&mut store, &forward, &feats, &mut state, cfg.epochs, &mut |_| {})?;
    Ok(state.history)
}
