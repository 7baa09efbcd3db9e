use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use visformer::analysis::{complexity, count_params};
use visformer::attention::DEFAULT_PB_RELAX_ALPHA;
use visformer::checkpoint::Checkpoint;
use visformer::config::ModelConfig;
use visformer::data::synth_dataset;
use visformer::fp16::{compare_modes, constant_qk, scores_f16, OverflowReport};
use visformer::gradcheck::{check_model, GradCheckOptions};
use visformer::presets::{preset, MICRO_SUFFIX};
use visformer::train::{linear_probe, train_until, EpochMetrics, TrainConfig};
use visformer::{Error, Model, ScalingMode};

#[derive(Parser)]
#[command(name = "visformer", version, about = "Build, measure, check and train Visformer-family networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Layer-by-layer output shapes and parameter counts.
    Describe {
        /// Preset name or path to a JSON model config.
        model: String,
    },
    /// FLOPs (multiply-accumulates) and parameters at a given resolution.
    Flops {
        model: String,
        #[arg(long)]
        res: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Train on the synthetic dataset described by a JSON train config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Where to write the final checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs in total (the schedule still spans `epochs`).
        #[arg(long)]
        stop_after: Option<usize>,
        /// Also train a linear probe on the frozen initial backbone and report its final loss.
        #[arg(long)]
        probe: bool,
    },
    /// Finite-difference check of every parameter gradient on a micro model.
    Gradcheck {
        model: String,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use batch statistics in batch-norm layers.
        #[arg(long)]
        training: bool,
    },
    /// Half-precision attention logits on constant Q and K.
    Fp16 {
        /// standard, prenorm, fullnorm, pb_relax or all.
        #[arg(long, default_value = "all")]
        mode: String,
        #[arg(long)]
        d: usize,
        /// Value of every Q and K entry.
        #[arg(long)]
        mag: f64,
        #[arg(long, default_value_t = DEFAULT_PB_RELAX_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = 4)]
        tokens: usize,
        #[arg(long)]
        json: bool,
    },
}

/// Failures caused by the caller rather than the computation.
fn is_usage_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<Error>(),
            Some(Error::UnknownPreset(_) | Error::Config { .. })
        )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn resolve_model(name: &str) -> Result<ModelConfig> {
    if name.ends_with(".json") || Path::new(name).is_file() {
        return ModelConfig::load(name).with_context(|| format!("loading model config {name}"));
    }
    Ok(preset(name)?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Describe { model } => {
            let cfg = resolve_model(&model)?;
            let built = Model::build(cfg.clone(), 0)?;
            let report = count_params(&cfg)?;
            if report.total_params != built.num_params() as u64 {
                bail!(
                    "shape table counts {} params but the built model has {}",
                    report.total_params,
                    built.num_params()
                );
            }
            println!("{report}");
        }
        Command::Flops { model, res, json } => {
            let cfg = resolve_model(&model)?;
            let report = complexity(&cfg, res.unwrap_or(cfg.input_resolution))?;
            if json {
                println!("{}", report.to_json());
            } else {
                println!("{report}");
            }
        }
        Command::Train {
            config,
            out,
            resume,
            stop_after,
            probe,
        } => return cmd_train(&config, out, resume, stop_after, probe),
        Command::Gradcheck {
            model,
            tol,
            samples,
            seed,
            training,
        } => {
            let name = if model.ends_with(MICRO_SUFFIX) || model.ends_with(".json") {
                model
            } else {
                format!("{model}{MICRO_SUFFIX}")
            };
            let cfg = resolve_model(&name)?;
            let opts = GradCheckOptions {
                tolerance: tol,
                samples_per_param: samples,
                seed,
                training,
                ..GradCheckOptions::default()
            };
            let report = check_model(&cfg, 2, &opts, None)?;
            for p in &report.params {
                println!(
                    "{}  {:<48} checked {:>2}  max rel err {:.3e}",
                    if p.passed { "pass" } else { "FAIL" },
                    p.path,
                    p.checked,
                    p.max_rel_err
                );
            }
            if let Some(w) = report.worst() {
                println!(
                    "worst: {} [{}] analytic {:.6e} numeric {:.6e} rel err {:.3e}",
                    w.path, w.worst_index, w.analytic, w.numeric, w.max_rel_err
                );
            }
            let failed = report.params.iter().filter(|p| !p.passed).count();
            if failed > 0 {
                eprintln!("{failed} of {} parameter groups exceed tolerance {tol:e}", report.params.len());
                return Ok(ExitCode::FAILURE);
            }
            println!("{}: all {} parameter groups within {tol:e}", cfg.name, report.params.len());
        }
        Command::Fp16 {
            mode,
            d,
            mag,
            alpha,
            tokens,
            json,
        } => {
            if d == 0 || tokens == 0 {
                bail!(Error::Config {
                    path: "fp16".into(),
                    msg: "--d and --tokens must be positive".into()
                });
            }
            let (q, k) = constant_qk(tokens, d, mag);
            let reports = if mode == "all" {
                compare_modes(&q, &k, alpha)?
            } else {
                let m = ScalingMode::parse(&mode, alpha).map_err(|e| Error::Config {
                    path: "fp16.mode".into(),
                    msg: e.to_string(),
                })?;
                vec![scores_f16(&q, &k, m)?.2]
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            } else {
                print!("{}", overflow_table(&reports));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn overflow_table(reports: &[OverflowReport]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2e}"));
    let mut out = format!(
        "{:<10} {:>5} {:>6} {:>9} {:>9} {:>10} {:>12} {:>8} {:>10} {:>10}\n",
        "mode", "d", "tokens", "magnitude", "overflows", "underflows", "max |logit|", "softmax", "vs same", "vs full"
    );
    for r in reports {
        out += &format!(
            "{:<10} {:>5} {:>6} {:>9} {:>9} {:>10} {:>12} {:>8} {:>10} {:>10}\n",
            r.mode,
            r.d,
            r.tokens,
            r.magnitude,
            r.overflow_count,
            r.underflow_count,
            if r.max_abs_logit.is_finite() { format!("{:.1}", r.max_abs_logit) } else { "inf".into() },
            if r.softmax_valid { "valid" } else { "invalid" },
            opt(r.divergence_same_mode),
            opt(r.divergence_fullnorm)
        );
    }
    out
}

fn cmd_train(config: &Path, out: Option<PathBuf>, resume: Option<PathBuf>, stop_after: Option<usize>, probe: bool) -> Result<ExitCode> {
    let cfg = TrainConfig::load(config).with_context(|| format!("loading train config {}", config.display()))?;
    let resume = match resume {
        Some(p) => {
            let (model, state) = Checkpoint::load(&p)
                .with_context(|| format!("loading checkpoint {}", p.display()))?
                .into_model()?;
            let state = state.context("checkpoint carries no training state")?;
            Some((model, state))
        }
        None => None,
    };
    let mut log = |m: &EpochMetrics| {
        eprintln!(
            "epoch {:>3}  lr {:.3e}  loss {:.4}  acc {:.4}",
            m.epoch, m.lr, m.loss, m.accuracy
        );
    };
    let outcome = train_until(&cfg, resume, stop_after.unwrap_or(cfg.epochs), &mut log)?;
    let last = outcome.final_metrics().cloned();
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "preset": cfg.preset,
            "epochs_completed": outcome.state.next_epoch,
            "final": last,
            "eval_loss": outcome.eval_loss,
            "eval_accuracy": outcome.eval_accuracy,
        }))?
    );
    if probe {
        let data = synth_dataset(&cfg.data)?;
        let hist = linear_probe(&cfg, &data)?;
        if let (Some(p), Some(m)) = (hist.last(), last.as_ref()) {
            println!(
                "linear probe final loss {:.4} acc {:.4}; model final loss {:.4}",
                p.loss, p.accuracy, m.loss
            );
        }
    }
    if let Some(path) = out {
        Checkpoint::from_model(&outcome.model, Some(outcome.state.clone()))
            .save(&path)
            .with_context(|| format!("writing checkpoint {}", path.display()))?;
        eprintln!("checkpoint written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
