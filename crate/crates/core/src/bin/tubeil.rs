//! Command-line entry point: tube estimation, demonstration collection,
//! policy training, evaluation, full experiment suites, and latency reports.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use tubeil::config::Config;
use tubeil::experiments::{
    build_linear_pipeline, evaluate_flip, evaluate_linear, run_suite, timing_report_flip,
    timing_report_linear, DomainSpec, FlipController, LinController, Manifest, TaskSpec,
};
use tubeil::imitation::{
    augment_linear, augment_nonlinear, collect_demo_linear, fine_tune_flip, run_flip_episode, run_il_flip,
    run_il_linear, save_dataset_csv, write_curve_jsonl, FlipPipeline, FlipStrategy, LinStrategy, MethodSpec,
    Robustifier,
};
use tubeil::policy::{featurize_linear, MlpPolicy, Provenance};

#[derive(Parser)]
#[command(name = "tubeil", version, about = "Tube MPC experts and tube-guided imitation learning for multirotors")]
struct Cli {
    /// Optional TOML configuration file (defaults are built in).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Pipeline {
    Linear,
    Flip,
}

#[derive(Args)]
struct CommonRun {
    #[arg(long, value_enum)]
    pipeline: Pipeline,
    /// Tracking task for the linear pipeline (ignored for flip).
    #[arg(long, default_value = "figure-eight")]
    task: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the active configuration as TOML.
    Config,
    /// Estimate the disturbance tube for a pipeline and print it as JSON.
    EstimateTube {
        #[command(flatten)]
        common: CommonRun,
    },
    /// Collect expert demonstrations (optionally augmented) into a CSV dataset.
    Demo {
        #[command(flatten)]
        common: CommonRun,
        #[arg(long, default_value_t = 1)]
        demos: usize,
        /// Method string such as `dagger+sa-sparse`; only its augmentation
        /// part matters here (demonstrations are expert-flown).
        #[arg(long, default_value = "bc")]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an imitation-learning schedule and save the policy and curve.
    Train {
        #[command(flatten)]
        common: CommonRun,
        #[arg(long)]
        method: String,
        #[arg(long)]
        demos: usize,
        /// Comma-separated evaluation domains (e.g. `S,T1`).
        #[arg(long, default_value = "S")]
        domains: String,
        /// Output policy file.
        #[arg(long)]
        out: PathBuf,
        /// Optional learning-curve JSONL output.
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Flip pipeline only: unaugmented fine-tuning demonstrations
        /// collected after the main schedule.
        #[arg(long, default_value_t = 0)]
        fine_tune: usize,
    },
    /// Evaluate a saved policy (or the expert) in a domain.
    Evaluate {
        #[command(flatten)]
        common: CommonRun,
        /// Policy file; omit to evaluate the expert itself.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value = "S")]
        domain: String,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run a full multi-method, multi-seed experiment suite (resumable).
    Suite {
        /// Manifest JSON file, or use `--preset`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Built-in manifest: `tracking` or `flip`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 10)]
        demos: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare expert per-action latency against the policy forward pass.
    Timing {
        #[command(flatten)]
        common: CommonRun,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn parse_domains(cfg: &Config, spec: &str) -> Result<Vec<DomainSpec>> {
    let mg = cfg.sim.hover_thrust();
    spec.split(',')
        .map(|d| DomainSpec::parse(d.trim(), &cfg.il, mg).ok_or_else(|| anyhow!("unknown domain {d}")))
        .collect()
}

fn linear_task(name: &str) -> Result<TaskSpec> {
    TaskSpec::parse(name).ok_or_else(|| anyhow!("unknown task {name}"))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli.config)?;
    cfg.validate()?;

    match cli.cmd {
        Cmd::Config => {
            print!("{}", toml::to_string_pretty(&cfg)?);
        }
        Cmd::EstimateTube { common } => match common.pipeline {
            Pipeline::Linear => {
                let pipe = build_linear_pipeline(&cfg, &linear_task(&common.task)?)?;
                println!("{}", serde_json::to_string_pretty(&pipe.rt.tube)?);
            }
            Pipeline::Flip => {
                let pipe = FlipPipeline::build(&cfg.sim, &cfg)?;
                println!("{}", serde_json::to_string_pretty(&pipe.tube)?);
            }
        },
        Cmd::Demo { common, demos, method, out } => {
            let spec = MethodSpec::parse(&method).ok_or_else(|| anyhow!("unknown method {method}"))?;
            let mut data = tubeil::policy::Dataset::default();
            match common.pipeline {
                Pipeline::Linear => {
                    let pipe = build_linear_pipeline(&cfg, &linear_task(&common.task)?)?;
                    let steps = cfg.il.episode_steps.min(pipe.track.len_steps());
                    for i in 0..demos {
                        let seed = common.seed.wrapping_mul(10_000).wrapping_add(i as u64);
                        let source = DomainSpec::source();
                        let demo = collect_demo_linear(
                            &pipe.rt, &pipe.params, None, 1.0, &pipe.track, &source, steps, cfg.il.init_ball, seed,
                        )?;
                        data.extend(&demo.rows(Provenance::Demo));
                        match spec.robustifier {
                            Robustifier::SaSparse => data.extend(&augment_linear(
                                &demo, &pipe.rt.tube, &pipe.rt.k_gain, LinStrategy::Sparse, seed,
                            )?),
                            Robustifier::SaDense => data.extend(&augment_linear(
                                &demo, &pipe.rt.tube, &pipe.rt.k_gain, LinStrategy::Dense, seed,
                            )?),
                            Robustifier::SaUniform(n) => data.extend(&augment_linear(
                                &demo, &pipe.rt.tube, &pipe.rt.k_gain, LinStrategy::Uniform(n), seed,
                            )?),
                            _ => {}
                        }
                    }
                }
                Pipeline::Flip => {
                    let pipe = FlipPipeline::build(&cfg.sim, &cfg)?;
                    let with_gains = spec.robustifier.is_sa();
                    for i in 0..demos {
                        let seed = common.seed.wrapping_mul(10_000).wrapping_add(i as u64);
                        let source = DomainSpec::source();
                        let demo = run_flip_episode(
                            &pipe.params, &cfg, &pipe.plan, &pipe.tube, true, None, 1.0, &source,
                            cfg.il.episode_steps, seed, with_gains,
                        )?
                        .demo;
                        data.extend(&demo.rows(Provenance::Demo));
                        let strategy = match spec.robustifier {
                            Robustifier::SaSparse => Some(FlipStrategy::Sparse),
                            Robustifier::SaUniform(n) => Some(FlipStrategy::Uniform(n)),
                            _ => None,
                        };
                        if let Some(strategy) = strategy {
                            let (aug, report) = augment_nonlinear(&demo, &pipe.tube, strategy, seed)?;
                            data.extend(&aug);
                            eprintln!(
                                "demo {i}: {} augmented rows ({} via generalized predictor, {} skipped)",
                                report.rows, report.fallback_rows, report.skipped
                            );
                        }
                    }
                }
            }
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            save_dataset_csv(&data, &mut w)?;
            eprintln!("wrote {} rows to {}", data.len(), out.display());
        }
        Cmd::Train { common, method, demos, domains, out, curve, fine_tune } => {
            let spec = MethodSpec::parse(&method).ok_or_else(|| anyhow!("unknown method {method}"))?;
            let eval_domains = parse_domains(&cfg, &domains)?;
            let outcome = match common.pipeline {
                Pipeline::Linear => {
                    let pipe = build_linear_pipeline(&cfg, &linear_task(&common.task)?)?;
                    run_il_linear(&pipe, &cfg, spec, demos, &eval_domains, common.seed)?
                }
                Pipeline::Flip => {
                    let pipe = FlipPipeline::build(&cfg.sim, &cfg)?;
                    let mut o = run_il_flip(&pipe, &cfg, spec, demos, &eval_domains, common.seed)?;
                    if fine_tune > 0 {
                        let (p, _, _) = fine_tune_flip(&pipe, &cfg, &o.policy, fine_tune, common.seed)?;
                        o.policy = p;
                    }
                    o
                }
            };
            outcome.policy.save_file(&out)?;
            if let Some(cp) = curve {
                let mut w = std::io::BufWriter::new(std::fs::File::create(&cp)?);
                write_curve_jsonl(&outcome.curve, &mut w)?;
            }
            for p in &outcome.curve {
                eprintln!(
                    "demo {:>3} [{}] success {:>5.1}%  cost {:.4}  gap {}",
                    p.demo_idx,
                    p.domain,
                    p.success_rate,
                    p.stage_cost,
                    p.expert_gap.map(|g| format!("{g:.2}%")).unwrap_or_else(|| "–".into()),
                );
            }
        }
        Cmd::Evaluate { common, policy, domain, episodes } => {
            let eval_domains = parse_domains(&cfg, &domain)?;
            let d = &eval_domains[0];
            let n = episodes.unwrap_or(cfg.il.eval_episodes);
            let loaded = policy.map(|p| MlpPolicy::load_file(&p)).transpose()?;
            let m = match common.pipeline {
                Pipeline::Linear => {
                    let pipe = build_linear_pipeline(&cfg, &linear_task(&common.task)?)?;
                    let base = evaluate_linear(
                        LinController::Expert, &pipe.rt, &pipe.params, &pipe.track, d, n, common.seed,
                        cfg.il.init_ball, None,
                    )?;
                    match &loaded {
                        Some(p) => evaluate_linear(
                            LinController::Policy(p), &pipe.rt, &pipe.params, &pipe.track, d, n, common.seed,
                            cfg.il.init_ball, Some(&base),
                        )?,
                        None => base,
                    }
                }
                Pipeline::Flip => {
                    let pipe = FlipPipeline::build(&cfg.sim, &cfg)?;
                    let base = evaluate_flip(FlipController::Expert, &pipe, &cfg, d, n, common.seed, None)?;
                    match &loaded {
                        Some(p) => {
                            evaluate_flip(FlipController::Policy(p), &pipe, &cfg, d, n, common.seed, Some(&base))?
                        }
                        None => base,
                    }
                }
            };
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Cmd::Suite { manifest, preset, seeds, demos, out } => {
            let manifest = match (manifest, preset) {
                (Some(p), _) => serde_json::from_str(&std::fs::read_to_string(&p)?)?,
                (None, Some(name)) => match name.as_str() {
                    "tracking" => Manifest::tracking_suite(seeds, demos),
                    "flip" => Manifest::flip_suite(seeds, demos),
                    other => bail!("unknown preset {other}"),
                },
                (None, None) => bail!("provide --manifest or --preset"),
            };
            let report = run_suite(&cfg, &manifest, &out)?;
            eprintln!(
                "suite done: {} cells run, {} skipped, {} failed",
                report.cells_run,
                report.cells_skipped,
                report.failures.len()
            );
            for f in &report.failures {
                eprintln!("  FAILED {f}");
            }
            if !report.failures.is_empty() {
                std::process::exit(1);
            }
        }
        Cmd::Timing { common, policy, samples } => {
            let report = match common.pipeline {
                Pipeline::Linear => {
                    let pipe = build_linear_pipeline(&cfg, &linear_task(&common.task)?)?;
                    let p = match policy {
                        Some(path) => MlpPolicy::load_file(&path)?,
                        None => {
                            // Untrained policy of the configured architecture:
                            // latency does not depend on the weights.
                            let x = nalgebra::DVector::zeros(8);
                            let feat = featurize_linear(&x, &pipe.track.window(0, pipe.rt.horizon))?.len();
                            let mut dims = vec![feat];
                            dims.extend_from_slice(&cfg.train.hidden_linear);
                            dims.push(3);
                            MlpPolicy::new(&dims, cfg.train.seed)
                        }
                    };
                    timing_report_linear(&pipe, &p, samples)?
                }
                Pipeline::Flip => {
                    let pipe = FlipPipeline::build(&cfg.sim, &cfg)?;
                    let p = match policy {
                        Some(path) => MlpPolicy::load_file(&path)?,
                        None => {
                            let mut dims = vec![14];
                            dims.extend_from_slice(&cfg.train.hidden_flip);
                            dims.push(4);
                            MlpPolicy::new(&dims, cfg.train.seed)
                        }
                    };
                    timing_report_flip(&pipe, &cfg, &p, samples)?
                }
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            eprintln!("expert/policy mean latency ratio: {:.1}×", report.speedup);
        }
    }
    Ok(())
}
