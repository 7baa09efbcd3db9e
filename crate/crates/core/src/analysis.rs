//! Closed-form parameter and FLOPs accounting.
//!
//! One FLOP is one multiply-accumulate of a convolution, linear layer, or
//! attention matrix product. Norms, activations, softmax, pooling and
//! position-embedding additions count zero. Batch-norm running statistics
//! are buffers and are not parameters.

use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::config::{BlockKind, BlockSpec, EmbedSpec, HeadMode, ModelConfig, PosMode};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerReport {
    pub path: String,
    pub kind: String,
    /// Output shape for a batch of one.
    pub out_dims: Vec<usize>,
    pub flops: u64,
    /// Share of `flops` spent on `QKᵀ` and the weighted sum of values.
    pub attn_score_flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ComplexityReport {
    pub model: String,
    pub resolution: usize,
    pub layers: Vec<LayerReport>,
    pub total_flops: u64,
    pub total_params: u64,
}

impl ComplexityReport {
    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn attn_score_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.attn_score_flops).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.layers.iter().map(|l| l.path.len()).max().unwrap_or(4).max(5);
        writeln!(
            f,
            "{:<w$}  {:<10}  {:<22}  {:>14}  {:>12}",
            "layer", "kind", "output", "flops", "params"
        )?;
        for l in &self.layers {
            let mut dims = String::new();
            for (i, d) in l.out_dims.iter().enumerate() {
                if i > 0 {
                    dims.push('x');
                }
                write!(dims, "{d}")?;
            }
            writeln!(
                f,
                "{:<w$}  {:<10}  {:<22}  {:>14}  {:>12}",
                l.path, l.kind, dims, l.flops, l.params
            )?;
        }
        writeln!(
            f,
            "total flops {} ({:.3}G) @{}",
            self.total_flops,
            self.gflops(),
            self.resolution
        )?;
        write!(f, "total params {} (≈ {:.1}M)", self.total_params, self.mparams())
    }
}

fn conv_cost(cin: usize, cout: usize, k: usize, groups: usize, out_pixels: usize, bias: bool) -> (u64, u64) {
    let w = cout * (cin / groups) * k * k;
    ((w * out_pixels) as u64, (w + if bias { cout } else { 0 }) as u64)
}

fn embed_cost(spec: &EmbedSpec, cin: usize, conv_out: usize, norm_after: bool) -> (u64, u64) {
    let (f, p) = conv_cost(cin, spec.out_channels, spec.kernel, 1, conv_out * conv_out, spec.bias);
    (f, p + if norm_after { 2 * spec.out_channels as u64 } else { 0 })
}

fn ff_cost(b: &BlockSpec, tokens: usize) -> (u64, u64) {
    let (c, h) = (b.channels, b.hidden);
    let mut f = 2 * tokens * c * h;
    let mut p = 2 * c * h + h + c;
    if b.use_3x3 {
        f += tokens * h * (h / b.groups) * 9;
        p += h * (h / b.groups) * 9 + h;
    }
    (f as u64, p as u64)
}

/// `(flops, attention-score flops, params)` of one block on an `hw × ww`
/// map carrying `tokens` tokens.
pub fn block_cost(b: &BlockSpec, hw: usize, ww: usize, tokens: usize, rel_window: Option<(usize, usize)>) -> (u64, u64, u64) {
    let (c, h) = (b.channels, b.hidden);
    match b.kind {
        BlockKind::Bottleneck => {
            let (f1, p1) = conv_cost(c, h, 1, 1, tokens, true);
            let (f2, p2) = conv_cost(h, h, 3, b.groups, tokens, true);
            let (f3, p3) = conv_cost(h, c, 1, 1, tokens, true);
            (f1 + f2 + f3, 0, p1 + p2 + p3 + 2 * c as u64)
        }
        BlockKind::Mlp => {
            let (f, p) = ff_cost(b, tokens);
            (f, 0, p + 2 * c as u64)
        }
        BlockKind::Attention => {
            let a = b.attention.expect("validated attention spec");
            let ad = a.attn_dim();
            let t = tokens;
            let proj_f = (t * c * 3 * ad + t * ad * c) as u64;
            let score_f = (2 * t * t * ad) as u64;
            let proj_p = (c * 3 * ad + 3 * ad + ad * c + c) as u64;
            let rel_p = rel_window.map_or(0, |(wh, ww)| ((2 * wh - 1) * (2 * ww - 1) * a.heads) as u64);
            let (ff_f, ff_p) = ff_cost(b, t);
            (proj_f + score_f + ff_f, score_f, proj_p + rel_p + ff_p + 4 * c as u64)
        }
        BlockKind::Residual => {
            let out = b.out_channels();
            let opix = (hw / b.stride) * (ww / b.stride);
            let (f1, p1) = conv_cost(c, h, 1, 1, hw * ww, false);
            let (f2, p2) = conv_cost(h, h, 3, 1, opix, false);
            let (f3, p3) = conv_cost(h, out, 1, 1, opix, false);
            let mut f = f1 + f2 + f3;
            let mut p = p1 + p2 + p3 + (4 * h + 2 * out) as u64;
            if crate::blocks::residual_has_projection(b) {
                let (fd, pd) = conv_cost(c, out, 1, 1, opix, false);
                f += fd;
                p += pd + 2 * out as u64;
            }
            (f, 0, p)
        }
    }
}

/// Per-layer FLOPs and parameters at input resolution `res`.
pub fn complexity(cfg: &ModelConfig, res: usize) -> Result<ComplexityReport> {
    cfg.validate()?;
    let geoms = cfg.stage_geometry(res)?;
    let param_geoms = cfg.stage_geometry(cfg.input_resolution)?;
    let mut layers = Vec::new();
    let mut push = |path: String, kind: &str, out_dims: Vec<usize>, (flops, score, params): (u64, u64, u64)| {
        layers.push(LayerReport {
            path,
            kind: kind.to_string(),
            out_dims,
            flops,
            attn_score_flops: score,
            params,
        });
    };

    let (mut c, mut h) = (cfg.in_channels, res);
    if let Some(stem) = &cfg.stem {
        let conv_out = (h + 2 * stem.padding - stem.kernel) / stem.stride + 1;
        let (f, p) = conv_cost(c, stem.out_channels, stem.kernel, 1, conv_out * conv_out, stem.bias);
        let p = p + if stem.norm_after { 2 * stem.out_channels as u64 } else { 0 };
        c = stem.out_channels;
        h = if stem.max_pool { conv_out / 2 } else { conv_out };
        push("stem".into(), "stem", vec![1, c, h, h], (f, 0, p));
    }
    let cls = cfg.head_mode == HeadMode::ClsToken;
    for (si, stage) in cfg.stages.iter().enumerate() {
        if let Some(e) = &stage.pre_embed {
            let out = h / e.stride;
            push(
                format!("stages.{si}.embed"),
                "embed",
                vec![1, e.out_channels, out, out],
                {
                    let (f, p) = embed_cost(e, c, out, e.norm_after);
                    (f, 0, p)
                },
            );
            c = e.out_channels;
            h = out;
        }
        let g = geoms[si];
        debug_assert_eq!((g.channels, g.height), (c, h));
        let (mut tokens, mut layout) = (h * h, vec![1, c, h, h]);
        if cls {
            tokens += 1;
            layout = vec![1, c, tokens, 1];
            push("cls_token".into(), "token", layout.clone(), (0, 0, c as u64));
        }
        if cfg.pos_mode == PosMode::Absolute && stage.has_attention() {
            let pg = param_geoms[si];
            let ptok = pg.tokens() + usize::from(cls);
            push(
                format!("stages.{si}.pos_embed"),
                "pos_embed",
                layout.clone(),
                (0, 0, (pg.channels * ptok) as u64),
            );
        }
        for (bi, b) in stage.blocks.iter().enumerate() {
            let rel = (cfg.pos_mode == PosMode::Relative && b.kind == BlockKind::Attention)
                .then_some((param_geoms[si].height, param_geoms[si].width));
            let (hw, ww) = if cls { (tokens, 1) } else { (h, h) };
            let cost = block_cost(b, hw, ww, tokens, rel);
            h /= b.block_stride();
            c = b.out_channels();
            tokens = if cls { tokens } else { h * h };
            let out = if cls { vec![1, c, tokens, 1] } else { vec![1, c, h, h] };
            let kind = format!("{:?}", b.kind).to_lowercase();
            push(format!("stages.{si}.blocks.{bi}"), &kind, out, cost);
        }
    }
    if cfg.final_norm {
        let dims = if cls { vec![1, c, h * h + 1, 1] } else { vec![1, c, h, h] };
        push("norm".into(), "norm", dims, (0, 0, 2 * c as u64));
    }
    let k = cfg.num_classes;
    push("head".into(), "head", vec![1, k], ((c * k) as u64, 0, (c * k + k) as u64));

    let total_flops = layers.iter().map(|l| l.flops).sum();
    let total_params = layers.iter().map(|l| l.params).sum();
    Ok(ComplexityReport {
        model: cfg.name.clone(),
        resolution: res,
        layers,
        total_flops,
        total_params,
    })
}

/// Parameter count at the config's own input resolution.
pub fn count_params(cfg: &ModelConfig) -> Result<ComplexityReport> {
    complexity(cfg, cfg.input_resolution)
}

pub fn count_flops(cfg: &ModelConfig, res: usize) -> Result<ComplexityReport> {
    complexity(cfg, res)
}

/// Largest multiple of `groups` for which an MLP with a `3×3` conv of width
/// `h` costs no more per token than the plain `C → 4C → C` MLP:
/// `2Ch + 9h²/g ≤ 8C²`.
pub fn matched_hidden(c: usize, groups: usize) -> usize {
    let budget = 8 * c * c;
    let mut best = groups;
    let mut h = groups;
    while 2 * c * h + 9 * h * h / groups <= budget {
        best = h;
        h += groups;
    }
    best
}
