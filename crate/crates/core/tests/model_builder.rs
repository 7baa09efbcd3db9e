mod common;

use std::collections::BTreeMap;

use common::*;
use visformer::analysis::count_params;
use visformer::checkpoint::Checkpoint;
use visformer::config::{BlockKind, HeadMode, PosMode};
use visformer::diff::{ladder_step_component, structural_diff};
use visformer::presets::{names, preset, PRESETS};
use visformer::{Error, Model, ModelConfig, Tensor};

#[test]
fn unknown_preset_is_an_error() {
    assert!(matches!(preset("visformer_xl"), Err(Error::UnknownPreset(_))));
}

#[test]
fn visformer_v2_s_layout() {
    let cfg = preset("visformer_v2_s").unwrap();
    let depths: Vec<usize> = cfg.stages.iter().map(|s| s.blocks.len()).collect();
    let widths: Vec<usize> = cfg.stages.iter().map(|s| s.blocks[0].channels).collect();
    assert_eq!(depths, [1, 10, 14, 3]);
    assert_eq!(widths, [64, 128, 256, 512]);
}

#[test]
fn visformer_ti_layout() {
    let cfg = preset("visformer_ti").unwrap();
    let depths: Vec<usize> = cfg.stages.iter().map(|s| s.blocks.len()).collect();
    let widths: Vec<usize> = cfg.stages.iter().map(|s| s.blocks[0].channels).collect();
    assert_eq!(depths, [7, 4, 4]);
    assert_eq!(widths, [96, 192, 384]);
    assert_eq!(cfg.stem.as_ref().unwrap().out_channels, 16);
    let s1 = &cfg.stages[0].blocks[0];
    assert_eq!((s1.kind, s1.hidden, s1.groups), (BlockKind::Bottleneck, 192, 8));
}

#[test]
fn deit_s_layout() {
    let cfg = preset("deit_s").unwrap();
    assert_eq!(cfg.stages.len(), 1);
    let stage = &cfg.stages[0];
    assert_eq!(stage.pre_embed.as_ref().unwrap().kernel, 16);
    assert_eq!(stage.blocks.len(), 12);
    assert!(stage.blocks.iter().all(|b| *b == stage.blocks[0]));
    assert_eq!(stage.blocks[0].kind, BlockKind::Attention);
    assert_eq!(stage.blocks[0].channels, 384);
    assert_eq!(cfg.head_mode, HeadMode::ClsToken);
}

#[test]
fn v2_attention_only_in_last_two_stages() {
    for name in ["visformer_v2_ti", "visformer_v2_s", "visformer_v2_ti-micro", "visformer_v2_s-micro"] {
        let cfg = preset(name).unwrap();
        let n = cfg.stages.len();
        for (i, s) in cfg.stages.iter().enumerate() {
            if i < n - 2 {
                assert!(s.blocks.iter().all(|b| b.kind == BlockKind::Bottleneck), "{name} stage {i}");
            } else {
                assert!(s.blocks.iter().all(|b| b.kind == BlockKind::Attention), "{name} stage {i}");
            }
        }
        assert_eq!(cfg.pos_mode, PosMode::Relative);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = preset("visformer_ti").unwrap();
    cfg.head_mode = HeadMode::ClsToken;
    assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    let mut cfg = preset("visformer_ti").unwrap();
    cfg.input_resolution = 225;
    assert!(matches!(Model::build(cfg, 0), Err(Error::Config { .. })));
    let mut cfg = preset("visformer_ti").unwrap();
    cfg.stages[0].blocks[0].groups = 7;
    let err = cfg.validate().unwrap_err();
    assert!(err.to_string().contains("stages.0.blocks.0"), "{err}");
}

#[test]
fn json_round_trip_is_lossless() {
    for name in names() {
        let cfg = preset(&name).unwrap();
        let json = cfg.to_json();
        let back = ModelConfig::from_json(&json).unwrap();
        assert_eq!(back, cfg, "{name}");
        assert_eq!(back.to_json(), json);
    }
}

#[test]
fn param_count_matches_store_for_every_preset() {
    for name in names() {
        let cfg = preset(&name).unwrap();
        let report = count_params(&cfg).unwrap();
        let store = visformer::model::init_params(&cfg, 0).unwrap();
        assert_eq!(report.total_params as usize, store.num_params(), "{name}");
    }
}

#[test]
fn seeded_builds_are_byte_identical() {
    let a = Model::build(preset("visformer_ti-micro").unwrap(), 42).unwrap();
    let b = Model::build(preset("visformer_ti-micro").unwrap(), 42).unwrap();
    let c = Model::build(preset("visformer_ti-micro").unwrap(), 43).unwrap();
    let bytes = |m: &Model| Checkpoint::from_model(m, None).to_bytes().unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn init_statistics() {
    let m = Model::build(preset("visformer_s").unwrap(), 0).unwrap();
    let qkv = m.params.get("stages.1.blocks.0.attn.qkv.weight").unwrap();
    let n = qkv.numel() as f64;
    let mean = qkv.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (qkv.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    // truncation at ±2σ shrinks the std of N(0, 0.02²) to about 0.0176
    assert!((std - 0.0176).abs() < 0.001, "qkv std {std}");
    assert!(qkv.data().iter().all(|&v| v.abs() <= 0.04 + 1e-6));
    let bn = m.params.get("stem.norm.weight").unwrap();
    assert!(bn.data().iter().all(|&v| v == 1.0));
    assert!(m.params.get("stem.norm.bias").unwrap().data().iter().all(|&v| v == 0.0));
}

fn resolutions(m: &Model, res: usize) -> Vec<usize> {
    let x = Tensor::zeros(&[1, 3, res, res]);
    let (_, trace) = m.forward_traced(&x, false).unwrap();
    let mut out: Vec<usize> = Vec::new();
    for (_, d) in trace {
        if d.len() == 4 && out.last() != Some(&d[2]) {
            out.push(d[2]);
        }
    }
    out
}

#[test]
fn visformer_ti_full_size_forward() {
    let m = Model::build(preset("visformer_ti").unwrap(), 0).unwrap();
    let mut r = rng(1);
    let x: Tensor<f32> = uniform(&mut r, &[1, 3, 224, 224], 1.0);
    assert_eq!(m.forward(&x).unwrap().dims(), &[1, 1000]);
    assert_eq!(resolutions(&m, 224), [112, 28, 14, 7]);
}

#[test]
fn visformer_v2_ti_resolutions() {
    let m = Model::build(preset("visformer_v2_ti").unwrap(), 0).unwrap();
    assert_eq!(resolutions(&m, 224), [112, 56, 28, 14, 7]);
}

#[test]
fn traced_shapes_equal_the_shape_table() {
    for name in PRESETS {
        let name = format!("{name}-micro");
        let m = Model::build(preset(&name).unwrap(), 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let (_, trace) = m.forward_traced(&x, false).unwrap();
        let table: BTreeMap<&str, &[usize]> = m.shapes.iter().map(|l| (l.path.as_str(), &l.out_dims[..])).collect();
        assert!(!trace.is_empty());
        for (path, dims) in &trace {
            let expect = table.get(path.as_str()).unwrap_or_else(|| panic!("{name}: `{path}` missing from the shape table"));
            assert_eq!(&dims[..], *expect, "{name}: `{path}`");
        }
        // every table row is exercised by the forward pass
        assert_eq!(trace.len(), m.shapes.len(), "{name}");
    }
}

#[test]
fn shape_table_chains() {
    for name in names() {
        let m = Model::build(preset(&name).unwrap(), 0).unwrap();
        let mut blocks_seen = 0;
        for pair in m.shapes.windows(2) {
            let (prev, row) = (&pair[0], &pair[1]);
            let Some(rest) = row.path.strip_prefix("stages.") else { continue };
            let parts: Vec<&str> = rest.split('.').collect();
            if parts.len() != 3 || parts[1] != "blocks" {
                continue;
            }
            let (si, bi): (usize, usize) = (parts[0].parse().unwrap(), parts[2].parse().unwrap());
            let b = &m.config.stages[si].blocks[bi];
            let s = b.block_stride();
            let expect = [1, b.out_channels(), prev.out_dims[2] / s, prev.out_dims[3] / s];
            assert_eq!(prev.out_dims[1], b.channels, "{name}: input of `{}`", row.path);
            assert_eq!(row.out_dims, expect, "{name}: `{}` after `{}`", row.path, prev.path);
            blocks_seen += 1;
        }
        let total: usize = m.config.stages.iter().map(|s| s.blocks.len()).sum();
        assert_eq!(blocks_seen, total, "{name}");
    }
}

#[test]
fn eval_forward_is_bit_reproducible_and_row_independent() {
    let m = Model::build(preset("visformer_v2_ti-micro").unwrap(), 5).unwrap();
    let mut r = rng(2);
    let img: Tensor<f32> = uniform(&mut r, &[1, 3, 32, 32], 1.0);
    let pair = Tensor::new(&[2, 3, 32, 32], [img.data(), img.data()].concat()).unwrap();
    let a = m.forward(&pair).unwrap();
    let b = m.forward(&pair).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(&a.data()[..10], &a.data()[10..]);
    assert!(m.forward(&Tensor::zeros(&[1, 3, 33, 33])).is_err());
}

#[test]
fn transition_ladder_touches_one_component_per_step() {
    let ladder = ["deit_s", "net1", "net2", "net3", "net4", "net5", "net6", "net7"];
    for micro in ["", "-micro"] {
        for k in 1..ladder.len() {
            let a = preset(&format!("{}{micro}", ladder[k - 1])).unwrap();
            let b = preset(&format!("{}{micro}", ladder[k])).unwrap();
            let d = structural_diff(&a, &b).unwrap();
            let expect = ladder_step_component(k).unwrap();
            assert_eq!(d.into_iter().collect::<Vec<_>>(), [expect], "step {k}{micro}");
        }
    }
}
