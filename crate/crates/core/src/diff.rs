//! Attribution of config differences to architectural components.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::config::{BlockKind, ModelConfig, NormKind};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Classification head mode or class count.
    Head,
    /// Stem and patch-embedding layers.
    Embedding,
    /// Placement of blocks over resolutions, their widths and attention dims.
    StageLayout,
    /// Normalisation kind.
    Normalization,
    /// Width, 3×3 conv or grouping of feed-forward paths.
    FeedForwardConv,
    /// Absolute or relative position information.
    PositionEmbedding,
    /// Which blocks use self-attention.
    SelfAttention,
    /// Input resolution or channel count.
    Input,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Component::Head => "head",
            Component::Embedding => "embedding",
            Component::StageLayout => "stage_layout",
            Component::Normalization => "normalization",
            Component::FeedForwardConv => "feed_forward_conv",
            Component::PositionEmbedding => "position_embedding",
            Component::SelfAttention => "self_attention",
            Component::Input => "input",
        };
        f.write_str(s)
    }
}

/// Block as seen by the diff: where it runs and what it computes.
#[derive(Clone, Debug, PartialEq)]
struct FlatBlock {
    resolution: usize,
    kind: BlockKind,
    channels: usize,
    out_channels: usize,
    attn_dims: Option<(usize, usize)>,
    norm: NormKind,
    hidden: usize,
    use_3x3: bool,
    groups: usize,
}

fn flatten(cfg: &ModelConfig) -> Result<Vec<FlatBlock>> {
    let geoms = cfg.stage_geometry(cfg.input_resolution)?;
    let mut out = Vec::new();
    for (stage, g) in cfg.stages.iter().zip(geoms) {
        let mut res = g.height;
        for b in &stage.blocks {
            out.push(FlatBlock {
                resolution: res,
                kind: b.kind,
                channels: b.channels,
                out_channels: b.out_channels(),
                attn_dims: b.attention.map(|a| (a.heads, a.head_dim)),
                norm: b.norm,
                hidden: b.hidden,
                use_3x3: b.use_3x3,
                groups: b.groups,
            });
            res /= b.block_stride();
        }
    }
    Ok(out)
}

/// Components whose configuration differs between `a` and `b`.
///
/// Block differences are attributed in order: a change in which blocks
/// attend is `SelfAttention`; otherwise a change in block count, placement,
/// width or attention dims is `StageLayout`; then norm changes are
/// `Normalization` and feed-forward changes are `FeedForwardConv`.
pub fn structural_diff(a: &ModelConfig, b: &ModelConfig) -> Result<BTreeSet<Component>> {
    let mut out = BTreeSet::new();
    if a.input_resolution != b.input_resolution || a.in_channels != b.in_channels {
        out.insert(Component::Input);
    }
    if a.head_mode != b.head_mode || a.num_classes != b.num_classes {
        out.insert(Component::Head);
    }
    if a.pos_mode != b.pos_mode {
        out.insert(Component::PositionEmbedding);
    }
    if a.norm != b.norm || a.final_norm != b.final_norm {
        out.insert(Component::Normalization);
    }
    let embeds = |c: &ModelConfig| {
        (
            c.stem.clone(),
            c.stages.iter().filter_map(|s| s.pre_embed.clone()).collect::<Vec<_>>(),
        )
    };
    if embeds(a) != embeds(b) {
        out.insert(Component::Embedding);
    }

    let (fa, fb) = (flatten(a)?, flatten(b)?);
    let attends = |f: &[FlatBlock]| -> Vec<bool> { f.iter().map(|x| x.kind == BlockKind::Attention).collect() };
    let kinds = |f: &[FlatBlock]| -> Vec<BlockKind> { f.iter().map(|x| x.kind).collect() };
    let layout = |f: &[FlatBlock]| -> Vec<_> {
        f.iter()
            .map(|x| (x.resolution, x.channels, x.out_channels, x.attn_dims))
            .collect()
    };
    if attends(&fa) != attends(&fb) && (fa.iter().any(|x| x.kind == BlockKind::Attention) || fb.iter().any(|x| x.kind == BlockKind::Attention)) {
        out.insert(Component::SelfAttention);
    } else if kinds(&fa) != kinds(&fb) || layout(&fa) != layout(&fb) {
        out.insert(Component::StageLayout);
    } else {
        if fa.iter().zip(&fb).any(|(x, y)| x.norm != y.norm) {
            out.insert(Component::Normalization);
        }
        if fa
            .iter()
            .zip(&fb)
            .any(|(x, y)| (x.hidden, x.use_3x3, x.groups) != (y.hidden, y.use_3x3, y.groups))
        {
            out.insert(Component::FeedForwardConv);
        }
    }
    Ok(out)
}

/// The component each step of the DeiT-to-ResNet ladder is meant to change.
pub fn ladder_step_component(step: usize) -> Option<Component> {
    match step {
        1 => Some(Component::Head),
        2 => Some(Component::Embedding),
        3 => Some(Component::StageLayout),
        4 => Some(Component::Normalization),
        5 => Some(Component::FeedForwardConv),
        6 => Some(Component::PositionEmbedding),
        7 => Some(Component::SelfAttention),
        _ => None,
    }
}
