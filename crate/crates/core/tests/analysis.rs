use visformer::analysis::{count_flops, count_params};
use visformer::config::{BlockSpec, EmbedSpec, HeadMode, ModelConfig, NormKind, PosMode, StageSpec};
use visformer::model::forward_on_tape;
use visformer::presets::{names, preset, PRESETS};
use visformer::{Model, Tape, Tensor};

fn within(actual: f64, target: f64, tol: f64) -> bool {
    (actual - target).abs() <= tol * target
}

fn toy(res: usize, c: usize, stages: Vec<StageSpec>) -> ModelConfig {
    ModelConfig {
        name: "toy".into(),
        stem: None,
        stages,
        head_mode: HeadMode::Gap,
        pos_mode: PosMode::None,
        norm: NormKind::Layer,
        final_norm: false,
        num_classes: 10,
        input_resolution: res,
        in_channels: c,
    }
}

#[test]
fn table_examples() {
    let p = |n: &str| count_params(&preset(n).unwrap()).unwrap().mparams();
    let f = |n: &str| count_flops(&preset(n).unwrap(), 224).unwrap().gflops();
    assert!(within(p("visformer_s"), 40.2, 0.03), "{}", p("visformer_s"));
    assert!(within(p("visformer_v2_ti"), 9.4, 0.03), "{}", p("visformer_v2_ti"));
    assert!(within(f("visformer_s"), 4.9, 0.03), "{}", f("visformer_s"));
    assert!(within(f("deit_s"), 4.6, 0.03), "{}", f("deit_s"));
}

#[test]
fn pointwise_conv_with_bias_counts_c_squared_plus_c() {
    let c = 24;
    let cfg = toy(8, c, vec![StageSpec {
        pre_embed: Some(EmbedSpec::patch(1, c, false)),
        blocks: vec![],
    }]);
    let r = count_params(&cfg).unwrap();
    let embed = r.layers.iter().find(|l| l.path == "stages.0.embed").unwrap();
    assert_eq!(embed.params, (c * c + c) as u64);
    assert_eq!(embed.flops, (c * c * 64) as u64);
}

fn attention_toy(res: usize) -> ModelConfig {
    toy(res, 3, vec![StageSpec {
        pre_embed: Some(EmbedSpec::patch(2, 32, false)),
        blocks: vec![BlockSpec::attention(32, 64, 2, 16, NormKind::Layer); 2],
    }])
}

#[test]
fn attention_score_flops_scale_with_fourth_power_of_side() {
    for res in [8, 16, 28] {
        let a = count_flops(&attention_toy(res), res).unwrap().attn_score_flops();
        let b = count_flops(&attention_toy(2 * res), 2 * res).unwrap().attn_score_flops();
        assert!(a > 0);
        assert_eq!(b, 16 * a, "side {res}");
    }
}

#[test]
fn totals_are_sums_of_rows() {
    for name in names() {
        let cfg = preset(&name).unwrap();
        let r = count_flops(&cfg, cfg.input_resolution).unwrap();
        assert_eq!(r.total_flops, r.layers.iter().map(|l| l.flops).sum::<u64>(), "{name}");
        assert_eq!(r.total_params, r.layers.iter().map(|l| l.params).sum::<u64>(), "{name}");
    }
}

#[test]
fn flops_are_additive_over_stages_and_monotone() {
    let cfg = preset("visformer_s").unwrap();
    let r = count_flops(&cfg, 224).unwrap();
    let stage_sum: u64 = (0..cfg.stages.len())
        .map(|si| {
            let p = format!("stages.{si}.");
            r.layers.iter().filter(|l| l.path.starts_with(&p)).map(|l| l.flops).sum::<u64>()
        })
        .sum();
    let rest: u64 = r.layers.iter().filter(|l| !l.path.starts_with("stages.")).map(|l| l.flops).sum();
    assert_eq!(stage_sum + rest, r.total_flops);

    // one more block
    let mut deeper = cfg.clone();
    let extra = deeper.stages[1].blocks[0].clone();
    deeper.stages[1].blocks.push(extra);
    assert!(count_flops(&deeper, 224).unwrap().total_flops > r.total_flops);
    // wider MLPs
    let mut wider = cfg.clone();
    wider.stages[2].blocks.iter_mut().for_each(|b| b.hidden *= 2);
    assert!(count_flops(&wider, 224).unwrap().total_flops > r.total_flops);
}

#[test]
fn divisibility_error() {
    assert!(count_flops(&preset("visformer_v2_s").unwrap(), 225).is_err());
}

#[test]
fn tape_macs_equal_closed_form() {
    for name in PRESETS {
        let name = format!("{name}-micro");
        let m = Model::build(preset(&name).unwrap(), 0).unwrap();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
        forward_on_tape(&m.config, &m.params, &mut tape, x, false).unwrap();
        let closed = count_flops(&m.config, 32).unwrap().total_flops;
        assert_eq!(tape.macs(), closed, "{name}");
    }
}

#[test]
fn tape_macs_scale_with_batch() {
    let m = Model::build(preset("net3-micro").unwrap(), 0).unwrap();
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[3, 3, 32, 32]));
    forward_on_tape(&m.config, &m.params, &mut tape, x, false).unwrap();
    assert_eq!(tape.macs(), 3 * count_flops(&m.config, 32).unwrap().total_flops);
}

#[test]
fn report_renders_as_table_and_json() {
    let r = count_params(&preset("visformer_ti").unwrap()).unwrap();
    let text = r.to_string();
    assert!(text.lines().next().unwrap().starts_with("layer"));
    assert!(text.contains("10.3M"), "{text}");
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(v["total_params"].as_u64().unwrap(), r.total_params);
    assert_eq!(v["layers"].as_array().unwrap().len(), r.layers.len());
}
