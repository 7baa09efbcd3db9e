//! Building blocks: parameter initialisation and forward recording.
//!
//! Every block writes its parameters under a dot-separated prefix and reads
//! them back by the same names during the forward pass.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{mhsa, rel_bias_index, rel_table_rows, AttentionVars};
use crate::autograd::{Tape, Var};
use crate::config::{BlockKind, BlockSpec, EmbedSpec, HeadMode, NormKind};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;
pub const TRUNC_STD: f64 = 0.02;

/// Seeded parameter factory writing into a store.
pub struct Initializer<'a> {
    rng: ChaCha8Rng,
    store: &'a mut ParamStore<f32>,
}

impl<'a> Initializer<'a> {
    pub fn new(rng: ChaCha8Rng, store: &'a mut ParamStore<f32>) -> Self {
        Self { rng, store }
    }

    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Normal with std `σ`, redrawn outside `±2σ`.
    pub fn trunc_normal(&mut self, path: &str, dims: &[usize], std: f64) -> Result<()> {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z = self.normal();
                if z.abs() <= 2.0 {
                    break (z * std) as f32;
                }
            })
            .collect();
        self.trainable(path, Tensor::new(dims, data)?)
    }

    /// He normal scaled by fan-out `Cout·kh·kw` of a `[Cout, Cin/g, kh, kw]` weight.
    pub fn kaiming_fan_out(&mut self, path: &str, dims: &[usize]) -> Result<()> {
        let fan_out = dims[0] * dims[2] * dims[3];
        let std = (2.0 / fan_out as f64).sqrt();
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| (self.normal() * std) as f32).collect();
        self.trainable(path, Tensor::new(dims, data)?)
    }

    pub fn constant(&mut self, path: &str, dims: &[usize], v: f32) -> Result<()> {
        self.trainable(path, Tensor::full(dims, v))
    }

    pub fn buffer(&mut self, path: &str, dims: &[usize], v: f32) -> Result<()> {
        self.store.insert(path, Tensor::full(dims, v))
    }

    fn trainable(&mut self, path: &str, t: Tensor<f32>) -> Result<()> {
        self.store.insert(path, t.with_requires_grad(true))
    }

    pub fn norm(&mut self, prefix: &str, kind: NormKind, c: usize) -> Result<()> {
        self.constant(&format!("{prefix}.weight"), &[c], 1.0)?;
        self.constant(&format!("{prefix}.bias"), &[c], 0.0)?;
        if kind == NormKind::Batch {
            self.buffer(&format!("{prefix}.running_mean"), &[c], 0.0)?;
            self.buffer(&format!("{prefix}.running_var"), &[c], 1.0)?;
        }
        Ok(())
    }

    pub fn conv(&mut self, prefix: &str, cout: usize, cin_g: usize, k: usize, bias: bool) -> Result<()> {
        self.kaiming_fan_out(&format!("{prefix}.weight"), &[cout, cin_g, k, k])?;
        if bias {
            self.constant(&format!("{prefix}.bias"), &[cout], 0.0)?;
        }
        Ok(())
    }

    /// 1×1 conv acting as a token-wise linear layer, truncated-normal init.
    pub fn pointwise(&mut self, prefix: &str, cout: usize, cin: usize) -> Result<()> {
        self.trunc_normal(&format!("{prefix}.weight"), &[cout, cin, 1, 1], TRUNC_STD)?;
        self.constant(&format!("{prefix}.bias"), &[cout], 0.0)
    }

    pub fn linear(&mut self, prefix: &str, dout: usize, din: usize) -> Result<()> {
        self.trunc_normal(&format!("{prefix}.weight"), &[dout, din], TRUNC_STD)?;
        self.constant(&format!("{prefix}.bias"), &[dout], 0.0)
    }

    pub fn embed(&mut self, prefix: &str, spec: &EmbedSpec, cin: usize, norm: NormKind) -> Result<()> {
        self.conv(&format!("{prefix}.conv"), spec.out_channels, cin, spec.kernel, spec.bias)?;
        if spec.norm_after {
            self.norm(&format!("{prefix}.norm"), norm, spec.out_channels)?;
        }
        Ok(())
    }

    fn ff(&mut self, prefix: &str, spec: &BlockSpec) -> Result<()> {
        let (c, h) = (spec.channels, spec.hidden);
        self.pointwise(&format!("{prefix}.fc1"), h, c)?;
        if spec.use_3x3 {
            self.conv(&format!("{prefix}.conv"), h, h / spec.groups, 3, true)?;
        }
        self.pointwise(&format!("{prefix}.fc2"), c, h)
    }

    /// Parameters of one block; `window` is the token grid for a relative bias.
    pub fn block(&mut self, prefix: &str, spec: &BlockSpec, window: Option<(usize, usize)>) -> Result<()> {
        let (c, h) = (spec.channels, spec.hidden);
        match spec.kind {
            BlockKind::Bottleneck => {
                self.norm(&format!("{prefix}.norm"), spec.norm, c)?;
                self.conv(&format!("{prefix}.conv1"), h, c, 1, true)?;
                self.conv(&format!("{prefix}.conv2"), h, h / spec.groups, 3, true)?;
                self.conv(&format!("{prefix}.conv3"), c, h, 1, true)?;
            }
            BlockKind::Mlp => {
                self.norm(&format!("{prefix}.norm"), spec.norm, c)?;
                self.ff(&format!("{prefix}.mlp"), spec)?;
            }
            BlockKind::Attention => {
                let a = spec.attention.expect("validated attention spec");
                let ad = a.attn_dim();
                self.norm(&format!("{prefix}.norm1"), spec.norm, c)?;
                self.linear(&format!("{prefix}.attn.qkv"), 3 * ad, c)?;
                self.linear(&format!("{prefix}.attn.proj"), c, ad)?;
                if let Some((wh, ww)) = window {
                    self.trunc_normal(&format!("{prefix}.attn.rel_bias"), &[rel_table_rows(wh, ww), a.heads], TRUNC_STD)?;
                }
                self.norm(&format!("{prefix}.norm2"), spec.norm, c)?;
                self.ff(&format!("{prefix}.mlp"), spec)?;
            }
            BlockKind::Residual => {
                let out = spec.out_channels();
                self.conv(&format!("{prefix}.conv1"), h, c, 1, false)?;
                self.norm(&format!("{prefix}.bn1"), NormKind::Batch, h)?;
                self.conv(&format!("{prefix}.conv2"), h, h, 3, false)?;
                self.norm(&format!("{prefix}.bn2"), NormKind::Batch, h)?;
                self.conv(&format!("{prefix}.conv3"), out, h, 1, false)?;
                self.norm(&format!("{prefix}.bn3"), NormKind::Batch, out)?;
                if residual_has_projection(spec) {
                    self.conv(&format!("{prefix}.downsample.conv"), out, c, 1, false)?;
                    self.norm(&format!("{prefix}.downsample.bn"), NormKind::Batch, out)?;
                }
            }
        }
        Ok(())
    }
}

pub fn residual_has_projection(spec: &BlockSpec) -> bool {
    spec.stride != 1 || spec.out_channels() != spec.channels
}

/// Forward-recording context: the tape, the parameters, and the BN mode.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub training: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, training: bool) -> Self {
        Self { tape, store, training }
    }

    pub fn param(&mut self, path: &str) -> Result<Var> {
        self.tape.param(self.store, path)
    }

    fn opt_param(&mut self, path: &str) -> Result<Option<Var>> {
        if self.store.contains(path) {
            self.param(path).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn norm(&mut self, x: Var, kind: NormKind, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        match kind {
            NormKind::Layer => self.tape.layer_norm(x, g, b, LN_EPS),
            NormKind::Batch => {
                let rm = self.store.get(&format!("{prefix}.running_mean"))?.data();
                let rv = self.store.get(&format!("{prefix}.running_var"))?.data();
                self.tape
                    .batch_norm(x, g, b, rm, rv, self.training, BN_EPS, BN_MOMENTUM, prefix)
            }
        }
    }

    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.opt_param(&format!("{prefix}.bias"))?;
        self.tape.conv2d(x, w, b, stride, pad, groups)
    }

    /// Stem: conv, then BN and ReLU when `norm_after`, then the optional max pool.
    pub fn stem(&mut self, x: Var, spec: &EmbedSpec, prefix: &str) -> Result<Var> {
        self.tape.set_layer(prefix);
        let mut y = self.conv(x, &format!("{prefix}.conv"), spec.stride, spec.padding, 1)?;
        if spec.norm_after {
            y = self.norm(y, NormKind::Batch, &format!("{prefix}.norm"))?;
            y = self.tape.relu(y)?;
        }
        if spec.max_pool {
            y = self.tape.max_pool2d(y, 3, 2, 1)?;
        }
        Ok(y)
    }

    /// Non-overlapping patch embedding, with the configured norm after it.
    pub fn patch_embed(&mut self, x: Var, spec: &EmbedSpec, norm: NormKind, prefix: &str) -> Result<Var> {
        self.tape.set_layer(prefix);
        let d = self.tape.dims(x);
        if d.len() == 4 && (!d[2].is_multiple_of(spec.stride) || !d[3].is_multiple_of(spec.stride)) {
            return Err(Error::dim(
                "patch_embed",
                "spatial dims",
                format!("multiples of {}", spec.stride),
                format!("{}x{}", d[2], d[3]),
            ));
        }
        let mut y = self.conv(x, &format!("{prefix}.conv"), spec.stride, spec.padding, 1)?;
        if spec.norm_after {
            y = self.norm(y, norm, &format!("{prefix}.norm"))?;
        }
        Ok(y)
    }

    fn ff(&mut self, x: Var, spec: &BlockSpec, prefix: &str) -> Result<Var> {
        let mut y = self.conv(x, &format!("{prefix}.fc1"), 1, 0, 1)?;
        y = self.tape.gelu(y)?;
        if spec.use_3x3 {
            y = self.conv(y, &format!("{prefix}.conv"), 1, 1, spec.groups)?;
            y = self.tape.gelu(y)?;
        }
        self.conv(y, &format!("{prefix}.fc2"), 1, 0, 1)
    }

    fn check_channels(&self, op: &'static str, x: Var, c: usize) -> Result<()> {
        let d = self.tape.dims(x);
        if d.len() != 4 || d[1] != c {
            return Err(Error::dim(op, "input channels", c, format!("{d:?}")));
        }
        Ok(())
    }

    pub fn bottleneck(&mut self, x: Var, spec: &BlockSpec, prefix: &str) -> Result<Var> {
        self.check_channels("bottleneck", x, spec.channels)?;
        let y = self.norm(x, spec.norm, &format!("{prefix}.norm"))?;
        let y = self.conv(y, &format!("{prefix}.conv1"), 1, 0, 1)?;
        let y = self.tape.relu(y)?;
        let y = self.conv(y, &format!("{prefix}.conv2"), 1, 1, spec.groups)?;
        let y = self.tape.relu(y)?;
        let y = self.conv(y, &format!("{prefix}.conv3"), 1, 0, 1)?;
        self.tape.add(x, y)
    }

    pub fn mlp_block(&mut self, x: Var, spec: &BlockSpec, prefix: &str) -> Result<Var> {
        self.check_channels("mlp_block", x, spec.channels)?;
        let y = self.norm(x, spec.norm, &format!("{prefix}.norm"))?;
        let y = self.ff(y, spec, &format!("{prefix}.mlp"))?;
        self.tape.add(x, y)
    }

    /// `x + MHSA(norm(x))`, then `y + MLP(norm(y))`.
    pub fn attention_block(&mut self, x: Var, spec: &BlockSpec, prefix: &str) -> Result<Var> {
        self.check_channels("attention_block", x, spec.channels)?;
        let a = spec
            .attention
            .ok_or_else(|| Error::invalid("attention_block", "missing attention spec"))?;
        let h = self.norm(x, spec.norm, &format!("{prefix}.norm1"))?;
        let w = AttentionVars {
            w_qkv: self.param(&format!("{prefix}.attn.qkv.weight"))?,
            b_qkv: self.opt_param(&format!("{prefix}.attn.qkv.bias"))?,
            w_proj: self.param(&format!("{prefix}.attn.proj.weight"))?,
            b_proj: self.opt_param(&format!("{prefix}.attn.proj.bias"))?,
        };
        let bias = match self.opt_param(&format!("{prefix}.attn.rel_bias"))? {
            Some(table) => {
                let d = self.tape.dims(x);
                let (wh, ww) = (d[2], d[3]);
                let rows = self.tape.dims(table)[0];
                if rows != rel_table_rows(wh, ww) {
                    return Err(Error::dim(
                        "attention_block",
                        "relative bias window",
                        rows,
                        format!("{} rows for a {wh}x{ww} map", rel_table_rows(wh, ww)),
                    ));
                }
                let t = wh * ww;
                Some(self.tape.gather(table, rel_bias_index(wh, ww, a.heads), &[a.heads, t, t])?)
            }
            None => None,
        };
        let att = mhsa(self.tape, h, w, bias, a.heads, a.head_dim, a.mode)?;
        let y = self.tape.add(x, att)?;
        let h = self.norm(y, spec.norm, &format!("{prefix}.norm2"))?;
        let m = self.ff(h, spec, &format!("{prefix}.mlp"))?;
        self.tape.add(y, m)
    }

    /// Post-norm ResNet bottleneck.
    pub fn residual(&mut self, x: Var, spec: &BlockSpec, prefix: &str) -> Result<Var> {
        self.check_channels("residual", x, spec.channels)?;
        let y = self.conv(x, &format!("{prefix}.conv1"), 1, 0, 1)?;
        let y = self.norm(y, NormKind::Batch, &format!("{prefix}.bn1"))?;
        let y = self.tape.relu(y)?;
        let y = self.conv(y, &format!("{prefix}.conv2"), spec.stride, 1, 1)?;
        let y = self.norm(y, NormKind::Batch, &format!("{prefix}.bn2"))?;
        let y = self.tape.relu(y)?;
        let y = self.conv(y, &format!("{prefix}.conv3"), 1, 0, 1)?;
        let y = self.norm(y, NormKind::Batch, &format!("{prefix}.bn3"))?;
        let skip = if residual_has_projection(spec) {
            let s = self.conv(x, &format!("{prefix}.downsample.conv"), spec.stride, 0, 1)?;
            self.norm(s, NormKind::Batch, &format!("{prefix}.downsample.bn"))?
        } else {
            x
        };
        let y = self.tape.add(skip, y)?;
        self.tape.relu(y)
    }

    pub fn block(&mut self, x: Var, spec: &BlockSpec, prefix: &str) -> Result<Var> {
        self.tape.set_layer(prefix);
        match spec.kind {
            BlockKind::Bottleneck => self.bottleneck(x, spec, prefix),
            BlockKind::Mlp => self.mlp_block(x, spec, prefix),
            BlockKind::Attention => self.attention_block(x, spec, prefix),
            BlockKind::Residual => self.residual(x, spec, prefix),
        }
    }

    /// Pooled (`gap`) or token-0 (`cls_token`) features `[N, C]`.
    pub fn pool(&mut self, x: Var, mode: HeadMode) -> Result<Var> {
        match mode {
            HeadMode::Gap => {
                if self.tape.dims(x).len() != 4 {
                    return Err(Error::invalid("head", "gap head expects an NCHW feature map"));
                }
                self.tape.global_avg_pool(x)
            }
            HeadMode::ClsToken => {
                let d = self.tape.dims(x);
                if d.len() != 4 || d[3] != 1 {
                    return Err(Error::invalid("head", "cls_token head expects a [N, C, T, 1] token sequence"));
                }
                self.tape.select_token(x, 0)
            }
        }
    }

    /// Classifier: [`Ctx::pool`] followed by a linear layer.
    pub fn head(&mut self, x: Var, mode: HeadMode, prefix: &str) -> Result<Var> {
        self.tape.set_layer(prefix);
        let feat = self.pool(x, mode)?;
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.opt_param(&format!("{prefix}.bias"))?;
        self.tape.linear(feat, w, b)
    }
}
