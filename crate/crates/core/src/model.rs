use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{count_params, LayerReport};
use crate::autograd::{Tape, Var};
use crate::blocks::{Ctx, Initializer, TRUNC_STD};
use crate::config::{BlockKind, HeadMode, ModelConfig, PosMode};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// A configured network with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    /// Output shape, FLOPs and parameters per layer for a batch of one.
    pub shapes: Vec<LayerReport>,
}

/// Initialises every parameter of `cfg` from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let geoms = cfg.stage_geometry(cfg.input_resolution)?;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed), &mut store);
    let mut c = cfg.in_channels;
    if let Some(stem) = &cfg.stem {
        init.conv("stem.conv", stem.out_channels, c, stem.kernel, stem.bias)?;
        if stem.norm_after {
            init.norm("stem.norm", crate::config::NormKind::Batch, stem.out_channels)?;
        }
        c = stem.out_channels;
    }
    let cls = cfg.head_mode == HeadMode::ClsToken;
    for (si, stage) in cfg.stages.iter().enumerate() {
        let g = geoms[si];
        if let Some(e) = &stage.pre_embed {
            init.embed(&format!("stages.{si}.embed"), e, c, cfg.norm)?;
            c = e.out_channels;
        }
        if cls {
            init.trunc_normal("cls_token", &[c], TRUNC_STD)?;
        }
        if cfg.pos_mode == PosMode::Absolute && stage.has_attention() {
            let dims = if cls {
                vec![c, g.tokens() + 1, 1]
            } else {
                vec![c, g.height, g.width]
            };
            init.trunc_normal(&format!("stages.{si}.pos_embed"), &dims, TRUNC_STD)?;
        }
        for (bi, b) in stage.blocks.iter().enumerate() {
            let window = (cfg.pos_mode == PosMode::Relative && b.kind == BlockKind::Attention)
                .then_some((g.height, g.width));
            init.block(&format!("stages.{si}.blocks.{bi}"), b, window)?;
            c = b.out_channels();
        }
    }
    if cfg.final_norm {
        init.norm("norm", cfg.norm, c)?;
    }
    init.linear("head", cfg.num_classes, c)?;
    Ok(store)
}

/// Everything before the classifier; returns the final feature map.
fn body_on_tape<T: Real>(ctx: &mut Ctx<'_, T>, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let d = ctx.tape.dims(x).to_vec();
    if d.len() != 4 || d[1] != cfg.in_channels || d[2] != d[3] {
        return Err(Error::dim(
            "model_forward",
            "input",
            format!("[N, {}, R, R]", cfg.in_channels),
            format!("{d:?}"),
        ));
    }
    cfg.stage_geometry(d[2])?;
    let cls = cfg.head_mode == HeadMode::ClsToken;
    let mut h = x;
    if let Some(stem) = &cfg.stem {
        h = ctx.stem(h, stem, "stem")?;
        ctx.tape.mark("stem", h);
    }
    for (si, stage) in cfg.stages.iter().enumerate() {
        if let Some(e) = &stage.pre_embed {
            let path = format!("stages.{si}.embed");
            h = ctx.patch_embed(h, e, cfg.norm, &path)?;
            ctx.tape.mark(&path, h);
        }
        if cls {
            let (n, c, hh, ww) = ctx.tape.value(h).nchw();
            let seq = ctx.tape.reshape(h, &[n, c, hh * ww, 1])?;
            let tok = ctx.param("cls_token")?;
            h = ctx.tape.prepend_token(seq, tok)?;
            ctx.tape.mark("cls_token", h);
        }
        if cfg.pos_mode == PosMode::Absolute && stage.has_attention() {
            let path = format!("stages.{si}.pos_embed");
            ctx.tape.set_layer(&path);
            let e = ctx.param(&path)?;
            h = ctx.tape.add_broadcast(h, e)?;
            ctx.tape.mark(&path, h);
        }
        for (bi, b) in stage.blocks.iter().enumerate() {
            let path = format!("stages.{si}.blocks.{bi}");
            h = ctx.block(h, b, &path)?;
            ctx.tape.mark(&path, h);
        }
    }
    if cfg.final_norm {
        ctx.tape.set_layer("norm");
        h = ctx.norm(h, cfg.norm, "norm")?;
        ctx.tape.mark("norm", h);
    }
    Ok(h)
}

/// Records the forward pass of `cfg` on `tape`. Each top-level layer is
/// marked under the same path the complexity report uses.
pub fn forward_on_tape<T: Real>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    x: Var,
    training: bool,
) -> Result<Var> {
    let mut ctx = Ctx::new(tape, store, training);
    let h = body_on_tape(&mut ctx, cfg, x)?;
    let logits = ctx.head(h, cfg.head_mode, "head")?;
    ctx.tape.mark("head", logits);
    Ok(logits)
}

/// The `[N, C]` features the classifier sees.
pub fn features_on_tape<T: Real>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    x: Var,
    training: bool,
) -> Result<Var> {
    let mut ctx = Ctx::new(tape, store, training);
    let h = body_on_tape(&mut ctx, cfg, x)?;
    ctx.pool(h, cfg.head_mode)
}


/// `(layer path, output dims)` in execution order.
pub type LayerTrace = Vec<(String, Vec<usize>)>;

impl Model {
    /// Builds a model; identical seeds give bit-identical parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        let shapes = count_params(&config)?.layers;
        Ok(Self { config, params, shapes })
    }

    /// Eval-mode logits `[N, num_classes]`.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = forward_on_tape(&self.config, &self.params, &mut tape, xv, false)?;
        Ok(tape.value(y).clone())
    }

    /// Forward with layer tracing.
    pub fn forward_traced(&self, x: &Tensor<f32>, training: bool) -> Result<(Tensor<f32>, LayerTrace)> {
        let mut tape = Tape::new().with_trace();
        let xv = tape.constant(x.clone());
        let y = forward_on_tape(&self.config, &self.params, &mut tape, xv, training)?;
        Ok((tape.value(y).clone(), tape.trace().to_vec()))
    }

    /// Writes queued batch-norm running statistics back into the store.
    pub fn apply_running_updates(&mut self, tape: &mut Tape<f32>) -> Result<()> {
        crate::train::apply_running_updates(&mut self.params, tape)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }
}
