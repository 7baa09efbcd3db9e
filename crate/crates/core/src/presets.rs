//! Named network configurations.
//!
//! Every preset exists in full size (224×224 input, 1000 classes) and as a
//! `-micro` variant with channels divided by four, 32×32 input and 10
//! classes. Micro variants keep head counts, so their head dimension shrinks.

use crate::analysis::{count_flops, matched_hidden};
use crate::config::{BlockKind, BlockSpec, EmbedSpec, HeadMode, ModelConfig, NormKind, PosMode, StageSpec};
use crate::error::{Error, Result};

pub const MICRO_SUFFIX: &str = "-micro";

/// Base preset names; append [`MICRO_SUFFIX`] for the desk-scale variant.
pub const PRESETS: [&str; 13] = [
    "deit_s",
    "net1",
    "net2",
    "net3",
    "net4",
    "net5",
    "net6",
    "net7",
    "resnet50_shape",
    "visformer_ti",
    "visformer_s",
    "visformer_v2_ti",
    "visformer_v2_s",
];

/// Channel width of one attention head in full-size presets.
pub const HEAD_DIM: usize = 64;

#[derive(Clone, Copy)]
struct Scale {
    div: usize,
}

impl Scale {
    fn c(self, full: usize) -> usize {
        full / self.div
    }

    fn micro(self) -> bool {
        self.div > 1
    }

    fn resolution(self) -> usize {
        if self.micro() {
            32
        } else {
            224
        }
    }

    fn classes(self) -> usize {
        if self.micro() {
            10
        } else {
            1000
        }
    }

    /// Attention over `full_dim` channels with `full_dim / 64` heads.
    fn attention(self, full_c: usize, full_dim: usize, norm: NormKind) -> BlockSpec {
        let heads = full_dim / HEAD_DIM.min(full_dim);
        let dim = self.c(full_dim);
        BlockSpec::attention(self.c(full_c), 4 * self.c(full_c), heads, dim / heads, norm)
    }

    fn name(self, base: &str) -> String {
        if self.micro() {
            format!("{base}{MICRO_SUFFIX}")
        } else {
            base.to_string()
        }
    }
}

pub fn names() -> Vec<String> {
    PRESETS
        .iter()
        .flat_map(|n| [n.to_string(), format!("{n}{MICRO_SUFFIX}")])
        .collect()
}

/// Resolves a preset name such as `visformer_s` or `net3-micro`.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let (base, s) = match name.strip_suffix(MICRO_SUFFIX) {
        Some(b) => (b, Scale { div: 4 }),
        None => (name, Scale { div: 1 }),
    };
    let cfg = match base {
        "deit_s" => deit(s, HeadMode::ClsToken),
        "net1" => deit(s, HeadMode::Gap),
        "net2" => net(s, 2),
        "net3" => net(s, 3),
        "net4" => net(s, 4),
        "net5" => net(s, 5),
        "net6" => net(s, 6),
        "net7" => net7(s)?,
        "resnet50_shape" => resnet50(s),
        "visformer_ti" => visformer(s, 16, &[(96, 4, 'b', 7), (192, 2, 'a', 4), (384, 2, 'a', 4)], PosMode::Absolute),
        "visformer_s" => visformer(s, 32, &[(192, 4, 'b', 7), (384, 2, 'a', 4), (768, 2, 'a', 4)], PosMode::Absolute),
        "visformer_v2_ti" => visformer(
            s,
            24,
            &[(48, 2, 'b', 1), (96, 2, 'b', 4), (192, 2, 'a', 6), (384, 2, 'a', 3)],
            PosMode::Relative,
        ),
        "visformer_v2_s" => visformer(
            s,
            32,
            &[(64, 2, 'b', 1), (128, 2, 'b', 10), (256, 2, 'a', 14), (512, 2, 'a', 3)],
            PosMode::Relative,
        ),
        _ => return Err(Error::UnknownPreset(name.to_string())),
    };
    let cfg = ModelConfig { name: s.name(base), ..cfg };
    cfg.validate()?;
    Ok(cfg)
}

fn base_config(s: Scale, stem: Option<EmbedSpec>, stages: Vec<StageSpec>) -> ModelConfig {
    ModelConfig {
        name: String::new(),
        stem,
        stages,
        head_mode: HeadMode::Gap,
        pos_mode: PosMode::Absolute,
        norm: NormKind::Layer,
        final_norm: true,
        num_classes: s.classes(),
        input_resolution: s.resolution(),
        in_channels: 3,
    }
}

/// Single-resolution transformer: 16×16 patches, 12 blocks at C = 384.
fn deit(s: Scale, head: HeadMode) -> ModelConfig {
    let c = 384;
    let stage = StageSpec {
        pre_embed: Some(EmbedSpec::patch(16, s.c(c), false)),
        blocks: (0..12).map(|_| s.attention(c, c, NormKind::Layer)).collect(),
    };
    ModelConfig {
        head_mode: head,
        ..base_config(s, None, vec![stage])
    }
}

/// Transition ladder from step 2 on; `step` applies every change up to it.
fn net(s: Scale, step: usize) -> ModelConfig {
    let stem = Some(EmbedSpec::conv_stem(s.c(32)));
    let norm = if step >= 4 { NormKind::Batch } else { NormKind::Layer };
    let embeds = [(4, 192), (2, 384), (2, 768)];
    let stages: Vec<StageSpec> = if step == 2 {
        embeds
            .iter()
            .enumerate()
            .map(|(i, &(k, c))| StageSpec {
                pre_embed: Some(EmbedSpec::patch(k, s.c(c), false)),
                blocks: if i == 1 {
                    (0..12).map(|_| s.attention(c, c, norm)).collect()
                } else {
                    Vec::new()
                },
            })
            .collect()
    } else {
        embeds
            .iter()
            .enumerate()
            .map(|(i, &(k, c))| {
                // the 28×28 stage runs attention at half width and half head size
                let (dim, heads) = if i == 0 { (c / 2, c / HEAD_DIM) } else { (c, c / HEAD_DIM) };
                let blocks = (0..4)
                    .map(|_| {
                        let mut b = BlockSpec::attention(s.c(c), 4 * s.c(c), heads, s.c(dim) / heads, norm);
                        if step >= 5 {
                            b = b.with_3x3(matched_hidden(s.c(c), 1), 1);
                        }
                        b
                    })
                    .collect();
                StageSpec {
                    pre_embed: Some(EmbedSpec::patch(k, s.c(c), false)),
                    blocks,
                }
            })
            .collect()
    };
    ModelConfig {
        norm,
        pos_mode: if step >= 6 { PosMode::None } else { PosMode::Absolute },
        ..base_config(s, stem, stages)
    }
}

/// Net6 with every attention block turned into a feed-forward block, then
/// blocks added round-robin from the deepest stage until the full-size FLOPs
/// reach Net6's.
fn net7(s: Scale) -> Result<ModelConfig> {
    let depths = net7_depths()?;
    let mut cfg = net(s, 6);
    for (stage, &d) in cfg.stages.iter_mut().zip(&depths) {
        let proto = to_ff(&stage.blocks[0]);
        stage.blocks = vec![proto; d];
    }
    Ok(cfg)
}

fn to_ff(b: &BlockSpec) -> BlockSpec {
    BlockSpec {
        kind: BlockKind::Mlp,
        attention: None,
        ..b.clone()
    }
}

/// Stage depths of Net7, derived at full size.
pub fn net7_depths() -> Result<Vec<usize>> {
    let full = Scale { div: 1 };
    let net6 = net(full, 6);
    let target = count_flops(&net6, 224)?.total_flops;
    let mut cfg = net6.clone();
    for stage in &mut cfg.stages {
        stage.blocks.iter_mut().for_each(|b| *b = to_ff(b));
    }
    let n = cfg.stages.len();
    let mut next = n - 1;
    while count_flops(&cfg, 224)?.total_flops < target {
        let proto = cfg.stages[next].blocks[0].clone();
        cfg.stages[next].blocks.push(proto);
        next = (next + n - 1) % n;
    }
    Ok(cfg.stages.iter().map(|s| s.blocks.len()).collect())
}

/// `stages`: (channels, embed kernel, 'b'ottleneck or 'a'ttention, depth).
fn visformer(s: Scale, stem_c: usize, stages: &[(usize, usize, char, usize)], pos: PosMode) -> ModelConfig {
    let norm = NormKind::Batch;
    let stages = stages
        .iter()
        .map(|&(c, k, kind, depth)| StageSpec {
            pre_embed: Some(EmbedSpec::patch(k, s.c(c), true)),
            blocks: (0..depth)
                .map(|_| match kind {
                    'b' => BlockSpec::bottleneck(s.c(c), 2 * s.c(c), 8, norm),
                    _ => s.attention(c, c, norm),
                })
                .collect(),
        })
        .collect();
    ModelConfig {
        norm,
        pos_mode: pos,
        ..base_config(s, Some(EmbedSpec::conv_stem(s.c(stem_c))), stages)
    }
}

/// Stem with max pool, then {3, 4, 6, 3} post-norm bottlenecks; the first
/// block of stages 2 to 4 downsamples.
fn resnet50(s: Scale) -> ModelConfig {
    let stem = EmbedSpec {
        max_pool: true,
        ..EmbedSpec::conv_stem(s.c(64))
    };
    let mut cin = s.c(64);
    let stages = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)]
        .iter()
        .map(|&(w, depth, stride)| {
            let blocks = (0..depth)
                .map(|i| {
                    let b = BlockSpec::residual(cin, s.c(w), 4 * s.c(w), if i == 0 { stride } else { 1 });
                    cin = 4 * s.c(w);
                    b
                })
                .collect();
            StageSpec { pre_embed: None, blocks }
        })
        .collect();
    ModelConfig {
        norm: NormKind::Batch,
        pos_mode: PosMode::None,
        final_norm: false,
        ..base_config(s, Some(stem), stages)
    }
}
