//! Declarative network description and its JSON form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::ScalingMode;
use crate::error::{Error, Result};
use crate::kernels::conv::out_extent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Layer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Gap,
    ClsToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosMode {
    None,
    Absolute,
    Relative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Pre-norm, 1×1 → grouped 3×3 → 1×1 with an identity skip.
    Bottleneck,
    /// Pre-norm feed-forward block, optionally with a 3×3 in the middle.
    Mlp,
    /// Pre-norm MHSA followed by a pre-norm MLP.
    Attention,
    /// Post-norm ResNet bottleneck with optional stride and projection skip.
    Residual,
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

fn yes() -> bool {
    true
}

/// A strided convolution: the stem or a patch embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub padding: usize,
    /// Normalisation after the conv (batch norm plus ReLU for a stem).
    #[serde(default)]
    pub norm_after: bool,
    #[serde(default = "yes")]
    pub bias: bool,
    /// 3×3 stride-2 max pool after the stem.
    #[serde(default, skip_serializing_if = "is_false")]
    pub max_pool: bool,
}

impl EmbedSpec {
    /// Non-overlapping `k×k` stride-`k` patch embedding with a bias.
    pub fn patch(k: usize, out_channels: usize, norm_after: bool) -> Self {
        Self {
            kernel: k,
            stride: k,
            out_channels,
            padding: 0,
            norm_after,
            bias: true,
            max_pool: false,
        }
    }

    /// 7×7 stride-2 conv stem without bias, followed by BN and ReLU.
    pub fn conv_stem(out_channels: usize) -> Self {
        Self {
            kernel: 7,
            stride: 2,
            out_channels,
            padding: 3,
            norm_after: true,
            bias: false,
            max_pool: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnSpec {
    pub heads: usize,
    pub head_dim: usize,
    #[serde(default)]
    pub mode: ScalingMode,
}

impl AttnSpec {
    pub fn attn_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Input (and, except for `residual`, output) channels.
    pub channels: usize,
    /// Expansion width of the feed-forward or bottleneck path.
    pub hidden: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub groups: usize,
    pub norm: NormKind,
    #[serde(default, skip_serializing_if = "is_false")]
    pub use_3x3: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttnSpec>,
    /// `residual` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    /// `residual` only.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub stride: usize,
}

impl BlockSpec {
    pub fn bottleneck(channels: usize, hidden: usize, groups: usize, norm: NormKind) -> Self {
        Self {
            kind: BlockKind::Bottleneck,
            channels,
            hidden,
            groups,
            norm,
            use_3x3: false,
            attention: None,
            out_channels: None,
            stride: 1,
        }
    }

    pub fn mlp(channels: usize, hidden: usize, norm: NormKind) -> Self {
        Self {
            kind: BlockKind::Mlp,
            ..Self::bottleneck(channels, hidden, 1, norm)
        }
    }

    pub fn attention(channels: usize, hidden: usize, heads: usize, head_dim: usize, norm: NormKind) -> Self {
        Self {
            kind: BlockKind::Attention,
            attention: Some(AttnSpec {
                heads,
                head_dim,
                mode: ScalingMode::Standard,
            }),
            ..Self::bottleneck(channels, hidden, 1, norm)
        }
    }

    pub fn residual(channels: usize, width: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            kind: BlockKind::Residual,
            out_channels: Some(out_channels),
            stride,
            ..Self::bottleneck(channels, width, 1, NormKind::Batch)
        }
    }

    /// Inserts a 3×3 conv with `groups` between the MLP's 1×1 layers.
    pub fn with_3x3(mut self, hidden: usize, groups: usize) -> Self {
        self.use_3x3 = true;
        self.hidden = hidden;
        self.groups = groups;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels.unwrap_or(self.channels)
    }

    /// Spatial stride applied by the block.
    pub fn block_stride(&self) -> usize {
        if self.kind == BlockKind::Residual {
            self.stride
        } else {
            1
        }
    }

    pub fn has_ff_3x3(&self) -> bool {
        matches!(self.kind, BlockKind::Mlp | BlockKind::Attention) && self.use_3x3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    #[serde(default)]
    pub pre_embed: Option<EmbedSpec>,
    #[serde(default)]
    pub blocks: Vec<BlockSpec>,
}

impl StageSpec {
    pub fn has_attention(&self) -> bool {
        self.blocks.iter().any(|b| b.kind == BlockKind::Attention)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub stem: Option<EmbedSpec>,
    pub stages: Vec<StageSpec>,
    pub head_mode: HeadMode,
    pub pos_mode: PosMode,
    pub norm: NormKind,
    #[serde(default = "yes")]
    pub final_norm: bool,
    pub num_classes: usize,
    pub input_resolution: usize,
    #[serde(default = "three")]
    pub in_channels: usize,
}

fn three() -> usize {
    3
}

/// Feature-map geometry at the entry of a stage's blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl StageGeom {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

fn embed_out(path: &str, spec: &EmbedSpec, h: usize, stem: bool) -> Result<(usize, usize)> {
    if spec.kernel == 0 || spec.stride == 0 || spec.out_channels == 0 {
        return Err(Error::config(path, "kernel, stride and out_channels must be positive"));
    }
    if spec.kernel < spec.stride {
        return Err(Error::config(path, format!("kernel {} smaller than stride {}", spec.kernel, spec.stride)));
    }
    if !stem && spec.kernel != spec.stride {
        return Err(Error::config(path, "patch embeddings need kernel == stride"));
    }
    if !h.is_multiple_of(spec.stride) {
        return Err(Error::config(
            path,
            format!("resolution {h} not divisible by stride {}", spec.stride),
        ));
    }
    let mut out = out_extent(h, spec.kernel, spec.stride, spec.padding)
        .ok_or_else(|| Error::config(path, format!("kernel {} exceeds padded input {h}", spec.kernel)))?;
    if spec.max_pool {
        if out % 2 != 0 {
            return Err(Error::config(path, format!("max pool input {out} is odd")));
        }
        out /= 2;
    }
    Ok((spec.out_channels, out))
}

impl ModelConfig {
    /// Checks the config and returns the geometry each stage sees at
    /// resolution `res`.
    pub fn stage_geometry(&self, res: usize) -> Result<Vec<StageGeom>> {
        if self.in_channels == 0 || res == 0 {
            return Err(Error::config("input", "channels and resolution must be positive"));
        }
        let (mut c, mut h) = (self.in_channels, res);
        if let Some(stem) = &self.stem {
            (c, h) = embed_out("stem", stem, h, true)?;
        }
        let mut geoms = Vec::with_capacity(self.stages.len());
        for (si, stage) in self.stages.iter().enumerate() {
            if let Some(e) = &stage.pre_embed {
                (c, h) = embed_out(&format!("stages.{si}.pre_embed"), e, h, false)?;
            }
            geoms.push(StageGeom {
                channels: c,
                height: h,
                width: h,
            });
            for (bi, b) in stage.blocks.iter().enumerate() {
                let path = format!("stages.{si}.blocks.{bi}");
                validate_block(&path, b, c)?;
                if h % b.block_stride() != 0 {
                    return Err(Error::config(&path, format!("resolution {h} not divisible by stride {}", b.stride)));
                }
                h /= b.block_stride();
                c = b.out_channels();
            }
        }
        Ok(geoms)
    }

    /// Channels feeding the head.
    pub fn final_channels(&self) -> usize {
        let mut c = self.stem.as_ref().map_or(self.in_channels, |s| s.out_channels);
        for s in &self.stages {
            if let Some(e) = &s.pre_embed {
                c = e.out_channels;
            }
            if let Some(b) = s.blocks.last() {
                c = b.out_channels();
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("stages", "at least one stage is required"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        if self.head_mode == HeadMode::ClsToken && self.stages.len() != 1 {
            return Err(Error::config("head_mode", "cls_token head requires a single-stage body"));
        }
        if self.head_mode == HeadMode::ClsToken && self.pos_mode == PosMode::Relative {
            return Err(Error::config("pos_mode", "relative bias is not defined with a class token"));
        }
        self.stage_geometry(self.input_resolution)?;
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

fn validate_block(path: &str, b: &BlockSpec, cin: usize) -> Result<()> {
    if b.channels != cin {
        return Err(Error::config(path, format!("expects {} input channels, stage provides {cin}", b.channels)));
    }
    if b.channels == 0 || b.hidden == 0 || b.groups == 0 {
        return Err(Error::config(path, "channels, hidden and groups must be positive"));
    }
    let needs_groups = b.kind == BlockKind::Bottleneck || b.has_ff_3x3();
    if needs_groups && !b.hidden.is_multiple_of(b.groups) {
        return Err(Error::config(path, format!("hidden {} not divisible by groups {}", b.hidden, b.groups)));
    }
    if !needs_groups && b.groups != 1 {
        return Err(Error::config(path, "groups only apply to a 3×3 conv"));
    }
    if b.use_3x3 && !matches!(b.kind, BlockKind::Mlp | BlockKind::Attention) {
        return Err(Error::config(path, "use_3x3 applies to mlp and attention blocks"));
    }
    match (b.kind, &b.attention) {
        (BlockKind::Attention, Some(a)) => {
            if a.heads == 0 || a.head_dim == 0 {
                return Err(Error::config(path, "heads and head_dim must be positive"));
            }
            if let ScalingMode::PbRelax { alpha } = a.mode {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::config(path, "pb_relax alpha must be positive"));
                }
            }
        }
        (BlockKind::Attention, None) => return Err(Error::config(path, "attention block without attention spec")),
        (_, Some(_)) => return Err(Error::config(path, "attention spec on a non-attention block")),
        _ => {}
    }
    match b.kind {
        BlockKind::Residual => {
            if b.out_channels.is_none_or(|c| c == 0) || b.stride == 0 {
                return Err(Error::config(path, "residual blocks need out_channels and a positive stride"));
            }
        }
        _ => {
            if b.out_channels.is_some_and(|c| c != b.channels) || b.stride != 1 {
                return Err(Error::config(path, "only residual blocks change shape"));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            name: "tiny".into(),
            stem: Some(EmbedSpec::conv_stem(8)),
            stages: vec![
                StageSpec {
                    pre_embed: Some(EmbedSpec::patch(2, 16, true)),
                    blocks: vec![BlockSpec::bottleneck(16, 32, 8, NormKind::Batch)],
                },
                StageSpec {
                    pre_embed: Some(EmbedSpec::patch(2, 32, true)),
                    blocks: vec![BlockSpec::attention(32, 64, 2, 16, NormKind::Batch)],
                },
            ],
            head_mode: HeadMode::Gap,
            pos_mode: PosMode::Absolute,
            norm: NormKind::Batch,
            final_norm: true,
            num_classes: 10,
            input_resolution: 32,
            in_channels: 3,
        }
    }

    #[test]
    fn geometry() {
        let g = tiny().stage_geometry(32).unwrap();
        assert_eq!(g[0], StageGeom { channels: 16, height: 8, width: 8 });
        assert_eq!(g[1], StageGeom { channels: 32, height: 4, width: 4 });
    }

    #[test]
    fn indivisible_resolution() {
        let err = tiny().stage_geometry(34).unwrap_err();
        assert!(err.to_string().contains("stages.0.pre_embed"), "{err}");
    }

    #[test]
    fn group_violation_reports_path() {
        let mut c = tiny();
        c.stages[0].blocks[0].groups = 5;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("stages.0.blocks.0"), "{err}");
    }

    #[test]
    fn cls_head_needs_single_stage() {
        let mut c = tiny();
        c.head_mode = HeadMode::ClsToken;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = tiny();
        let s = c.to_json();
        let back = ModelConfig::from_json(&s).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), s);
    }
}
