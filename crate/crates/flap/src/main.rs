use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use flap::config::{apply_overrides, load_config, save_config};
use flap::experiments::{self, Ablation};
use flap::files::{Checkpoint, TaskSetFile, TrainerSnapshot};
use flap::metrics::{
    self, export_ablation, export_curve, export_metrics, export_runtime, Format, MetricsRow,
};
use flap::report::{render_markdown, summarize};
use flap::timing;
use flap::{FlapError, Result};
use flap_core::env::Split;
use flap_core::meta::{self, AdaptMode, TrainConfig};

#[derive(Parser)]
#[command(
    name = "flap",
    version,
    about = "Fast linear adaptation meta-RL: training, adaptation, ablations and reports"
)]
struct Cli {
    /// Directory that relative output paths are resolved against.
    #[arg(long, env = "FLAP_OUTPUT_ROOT", default_value = "runs", global = true)]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train the policy and adapter on the train tasks.
    Train {
        /// TOML or JSON configuration; omitted fields keep desk defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: train-seed<SEED>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Field override such as `sac.policy_lr=1e-3`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_enum, default_value = "csv")]
        format: FormatArg,
        /// Also write the full trainer state (buffers included).
        #[arg(long)]
        snapshot: bool,
    },
    /// Adapt a trained checkpoint to its test tasks.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "in-dist")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "adapter")]
        mode: ModeArg,
        /// Feedback-loop steps (adapter mode); defaults to the validated value
        /// stored in the checkpoint.
        #[arg(long)]
        t_adapt: Option<usize>,
        /// Test-task step budget (gradient mode); defaults to the checkpoint's.
        #[arg(long)]
        budget: Option<u64>,
        /// Timing repeats per task.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (default: the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named ablation over one or more seeds.
    Ablate {
        #[arg(value_parser = parse_ablation)]
        name: Ablation,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (default: ablate-<NAME>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize every metrics, ablation and runtime CSV under a directory.
    Report {
        dir: PathBuf,
        /// Print JSON instead of markdown.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    InDist,
    Ood,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Adapter,
    Gradient,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse()
}

fn resolve(root: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        root.join(p)
    }
}

fn base_config(config: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let c = match config {
        Some(p) => load_config(p)?,
        None => TrainConfig::desk(),
    };
    let c = apply_overrides(&c, overrides)?;
    c.validate().map_err(|e| FlapError::Config(e.to_string()))?;
    Ok(c)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn train(
    root: &Path,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    overrides: Vec<String>,
    format: FormatArg,
    snapshot: bool,
) -> Result<()> {
    let mut c = base_config(config.as_deref(), &overrides)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    let out = resolve(
        root,
        out.unwrap_or_else(|| PathBuf::from(format!("train-seed{}", c.seed))),
    );
    save_config(&c, &out.join("config.json"))?;
    TaskSetFile::new(c.family, c.seed, c.sample_tasks()?).save(&out.join("tasks.json"))?;
    let (path, fmt) = match format {
        FormatArg::Csv => (out.join("metrics.csv"), Format::Csv),
        FormatArg::Json => (out.join("metrics.jsonl"), Format::Json),
    };
    if path.exists() {
        std::fs::remove_file(&path).map_err(|e| FlapError::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    export_metrics(&[], &path, fmt)?;
    let iterations = c.iterations;
    let run = experiments::train_run(c, "train", |row: &MetricsRow| {
        let r = &row.record;
        if r.test_return_in_dist.is_some() || r.iteration + 1 == iterations as u64 {
            eprintln!(
                "iteration {:>4}  steps {:>8}  train {:>9.3}  in-dist {:>9}  ood {:>9}  {:.1}s",
                r.iteration,
                r.env_steps_total,
                r.mean_train_return,
                fmt_opt(r.test_return_in_dist),
                fmt_opt(r.test_return_ood),
                r.wall_clock_s
            );
        }
        export_metrics(std::slice::from_ref(row), &path, fmt)
    })?;
    let mut trainer = run.trainer;
    if let Some(adapter) = &trainer.adapter {
        let (cfg, _) =
            experiments::validate_adaptation(&trainer, adapter, &trainer.config.eval_adapt)?;
        eprintln!(
            "validated on train tasks: initial head {:?}, feedback-loop length {}",
            cfg.initial_head, cfg.adaptation_steps
        );
        trainer.config.eval_adapt = cfg;
    }
    let ck = Checkpoint::from_trainer(&trainer);
    ck.save(&out.join("checkpoint.json"))?;
    if snapshot {
        TrainerSnapshot::save(&trainer, &out.join("snapshot.json"))?;
    }
    let mem = ck.memory();
    println!(
        "wrote {} (policy params {}, adapter params {}, total {})",
        out.display(),
        mem.policy_params,
        mem.model_params,
        mem.total
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adapt(
    root: &Path,
    checkpoint: PathBuf,
    split: SplitArg,
    mode: ModeArg,
    t_adapt: Option<usize>,
    budget: Option<u64>,
    repeats: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let ck = Checkpoint::load(&checkpoint)?;
    let split = match split {
        SplitArg::InDist => Split::TestInDist,
        SplitArg::Ood => Split::TestOod,
    };
    let tasks = ck.tasks_in(split);
    let mut cfg = ck.config.eval_adapt.clone();
    if let Some(t) = t_adapt {
        cfg.adaptation_steps = t;
    }
    if let Some(b) = budget {
        cfg.gradient.env_step_budget = b;
    }
    cfg.mode = match mode {
        ModeArg::Adapter => AdaptMode::Adapter,
        ModeArg::Gradient => AdaptMode::GradientBaseline,
    };
    cfg.validate(&ck.config.env)
        .map_err(|e| FlapError::Config(e.to_string()))?;
    let out = match out {
        Some(o) => resolve(root, o),
        None => checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    let env = ck.config.env;
    let label = format!("{}-{}", timing_label(cfg.mode), split_label(split));
    let mut rng = experiments::eval_rng(seed);
    let mut results = Vec::with_capacity(tasks.len());
    match cfg.mode {
        AdaptMode::Adapter => {
            let adapter = ck.adapter.as_ref().ok_or_else(|| {
                FlapError::Config("checkpoint has no adapter; use --mode gradient".into())
            })?;
            for t in &tasks {
                let o =
                    meta::meta_test_adapter(&ck.learner.policy, adapter, t, &env, &cfg, &mut rng)?;
                results.push((t.id, o.episode_return, o.trajectory.len() as u64));
            }
            let report =
                timing::time_adapter(&ck.learner.policy, adapter, &tasks, &env, &cfg, repeats)?;
            export_runtime(
                &out.join("runtime.csv"),
                &metrics::RuntimeReport {
                    method: label.clone(),
                    ..report
                },
            )?;
        }
        AdaptMode::GradientBaseline => {
            let (report, outcomes) =
                timing::time_gradient(&ck.learner, &tasks, &env, &cfg, repeats, seed)?;
            for o in &outcomes {
                let last = o.curve.last().map_or(f64::NAN, |p| p.episode_return);
                results.push((o.task_id, last, o.env_steps));
                export_curve(&out.join("curves.csv"), &label, seed, o.task_id, &o.curve)?;
            }
            export_runtime(
                &out.join("runtime.csv"),
                &metrics::RuntimeReport {
                    method: label.clone(),
                    ..report
                },
            )?;
        }
    }
    let rows: Vec<experiments::AblationRow> = results
        .iter()
        .flat_map(|&(id, ret, steps)| {
            [("return", ret), ("env_steps", steps as f64)].map(|(metric, value)| {
                experiments::AblationRow {
                    ablation: "adapt".into(),
                    variant: label.clone(),
                    seed,
                    metric: format!("task{id}_{metric}"),
                    value,
                }
            })
        })
        .collect();
    export_ablation(&out.join("adapt.csv"), &rows)?;
    println!("| task | return | test-task env steps |\n|---|---|---|");
    for (id, ret, steps) in &results {
        println!("| {id} | {ret:.3} | {steps} |");
    }
    let returns: Vec<f64> = results.iter().map(|r| r.1).collect();
    println!(
        "mean return over {} {} tasks: {}",
        results.len(),
        split_label(split),
        fmt_opt(flap_core::eval::mean(&returns))
    );
    Ok(())
}

fn timing_label(mode: AdaptMode) -> &'static str {
    match mode {
        AdaptMode::Adapter => timing::ADAPTER_METHOD,
        AdaptMode::GradientBaseline => timing::GRADIENT_METHOD,
    }
}

fn split_label(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::TestInDist => "in_dist",
        Split::TestOod => "ood",
    }
}

fn ablate(
    root: &Path,
    name: Ablation,
    config: Option<PathBuf>,
    seeds: Vec<u64>,
    overrides: Vec<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let c = base_config(config.as_deref(), &overrides)?;
    let out = resolve(
        root,
        out.unwrap_or_else(|| PathBuf::from(format!("ablate-{name}"))),
    );
    save_config(&c, &out.join("config.json"))?;
    let metrics_path = out.join("metrics.csv");
    let ablation_path = out.join("ablation.csv");
    for p in [&metrics_path, &ablation_path] {
        if p.exists() {
            std::fs::remove_file(p).map_err(|e| FlapError::Io {
                path: p.clone(),
                source: e,
            })?;
        }
    }
    export_metrics(&[], &metrics_path, Format::Csv)?;
    let start = Instant::now();
    for &seed in &seeds {
        let rows = experiments::run_ablation(name, &c, seed, &mut |row: &MetricsRow| {
            export_metrics(std::slice::from_ref(row), &metrics_path, Format::Csv)
        })?;
        export_ablation(&ablation_path, &rows)?;
        eprintln!(
            "seed {seed} done after {:.1}s",
            start.elapsed().as_secs_f64()
        );
    }
    print!("{}", render_markdown(&summarize(&out)?));
    Ok(())
}

fn report(dir: PathBuf, json: bool) -> Result<()> {
    let s = summarize(&dir)?;
    let md = render_markdown(&s);
    std::fs::write(dir.join("summary.md"), &md).map_err(|e| FlapError::Io {
        path: dir.join("summary.md"),
        source: e,
    })?;
    flap::files::write_json(&dir.join("summary.json"), &s)?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&s).expect("summary serializes")
        );
    } else {
        print!("{md}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.output_root;
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            overrides,
            format,
            snapshot,
        } => train(&root, config, seed, out, overrides, format, snapshot),
        Command::Adapt {
            checkpoint,
            split,
            mode,
            t_adapt,
            budget,
            repeats,
            seed,
            out,
        } => adapt(
            &root, checkpoint, split, mode, t_adapt, budget, repeats, seed, out,
        ),
        Command::Ablate {
            name,
            config,
            seeds,
            overrides,
            out,
        } => ablate(&root, name, config, seeds, overrides, out),
        Command::Report { dir, json } => report(dir, json),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
