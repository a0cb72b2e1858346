//! Command-line front end for `metasolve`.
//!
//! The binary is a thin wrapper over [`run`]; the benchmark routines in
//! [`bench`] are public so that tests can drive them without a subprocess.

pub mod bench;
mod commands;
mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use metasolve::meta::HeadKind;

pub use commands::{
    gradcheck_fixture, load_config, GradcheckRow, RunManifest, EvalOutput, DEFAULT_SPLITS,
};
pub use error::{CliError, CliResult};

/// Worker count from `METASOLVE_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var("METASOLVE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or(1)
}

#[derive(Debug, Parser)]
#[command(name = "metasolve", version, about = "Meta-learning with differentiable closed-form solvers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Generator {
    Gaussian,
    Glyph,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    WoodburyVsNaive,
    Heads,
    Steps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    R2d2,
    LrD2,
    LrD2Ova,
    Centroid,
    UnrolledGd,
}

impl From<HeadArg> for HeadKind {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::R2d2 => HeadKind::R2d2,
            HeadArg::LrD2 => HeadKind::LrD2,
            HeadArg::LrD2Ova => HeadKind::LrD2Ova,
            HeadArg::Centroid => HeadKind::Centroid,
            HeadArg::UnrolledGd => HeadKind::UnrolledGd,
        }
    }
}

/// Overrides for the evaluation episode shape.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct SpecArgs {
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and assign class splits.
    GenData {
        #[arg(long, value_enum)]
        generator: Generator,
        /// Defaults to 1000 (gaussian) or 100 (glyph).
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Samples per class.
        #[arg(long)]
        samples: Option<usize>,
        /// Smallest split size, in classes.
        #[arg(long, default_value_t = 5)]
        min_ways: usize,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Meta-train a model into a run directory.
    Train {
        /// TOML config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Sets both the episode and the initialisation seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
        /// IRLS or inner gradient steps.
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        spec: SpecArgs,
        /// Use the one-vs-all form of lr-d2 for multi-class episodes.
        #[arg(long)]
        ova: bool,
        #[arg(long)]
        max_episodes: Option<u64>,
        /// Continue from `latest.msck` in the run directory.
        #[arg(long)]
        resume: bool,
        /// Overwrite an existing run, or resume despite a config change.
        #[arg(long)]
        force: bool,
        /// Stop after this many completed episodes, as if interrupted.
        #[arg(long, hide = true)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint on meta-test episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to `config.json` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value_t = 10_000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate even if the config does not match the checkpoint.
        #[arg(long)]
        force: bool,
    },
    /// Timing and accuracy sweeps, written as CSV.
    Bench {
        #[arg(long, value_enum)]
        mode: BenchMode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Required by the heads and steps modes.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Meta-test episodes per accuracy point (steps mode).
        #[arg(long, default_value_t = 2000)]
        episodes: usize,
        /// Training budget per model (steps mode).
        #[arg(long)]
        max_episodes: Option<u64>,
        /// Support-set size of the ridge problems (woodbury-vs-naive mode).
        #[arg(long, default_value_t = 5)]
        n: usize,
    },
    /// Finite-difference check of the episode-loss gradient.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = HeadArg::R2d2)]
        head: HeadArg,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
}

pub fn run(cli: Cli) -> CliResult<()> {
    let threads = threads_from_env();
    match cli.command {
        Command::GenData {
            generator,
            classes,
            seed,
            out,
            samples,
            min_ways,
            split_seed,
        } => commands::gen_data(generator, classes, seed, &out, samples, min_ways, split_seed),
        Command::Train {
            config,
            dataset,
            out,
            seed,
            head,
            steps,
            spec,
            ova,
            max_episodes,
            resume,
            force,
            stop_after,
        } => {
            let overrides = commands::TrainOverrides {
                seed,
                head: head.map(Into::into),
                steps,
                spec,
                ova,
                max_episodes,
            };
            commands::train(config.as_deref(), &dataset, &out, &overrides, resume, force, stop_after, threads)
        }
        Command::Eval {
            checkpoint,
            dataset,
            config,
            head,
            spec,
            episodes,
            seed,
            out,
            force,
        } => {
            let report = commands::eval(
                &checkpoint,
                &dataset,
                config.as_deref(),
                head.map(Into::into),
                &spec,
                episodes,
                seed,
                force,
                threads,
            )?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            println!("{json}");
            if let Some(path) = out {
                std::fs::write(&path, format!("{json}\n")).map_err(CliError::io(&path))?;
            }
            Ok(())
        }
        Command::Bench {
            mode,
            out,
            seed,
            repeats,
            warmup,
            dataset,
            config,
            episodes,
            max_episodes,
            n,
        } => {
            let timing = bench::Timing { warmup, repeats };
            let csv = match mode {
                BenchMode::WoodburyVsNaive => {
                    let rows = bench::woodbury_vs_naive(&bench::default_dims(), n, 5, 1.0, timing, seed)?;
                    bench::ridge_csv(&rows)
                }
                BenchMode::Heads => {
                    let ds = commands::require_dataset(dataset.as_deref(), "heads")?;
                    let base = commands::base_config(config.as_deref())?;
                    let rows = bench::head_costs(
                        &ds,
                        &base,
                        &base.eval_spec,
                        &bench::default_head_set(),
                        timing,
                        200,
                        seed,
                    )?;
                    bench::heads_csv(&rows)
                }
                BenchMode::Steps => {
                    let ds = commands::require_dataset(dataset.as_deref(), "steps")?;
                    let mut base = match config.as_deref() {
                        Some(_) => commands::base_config(config.as_deref())?,
                        None => bench::binary_config(),
                    };
                    if let Some(m) = max_episodes {
                        base.max_episodes = m;
                    }
                    let rows =
                        bench::steps_sweep(&ds, &base, &bench::default_steps(), episodes, seed, threads)?;
                    bench::steps_csv(&rows)
                }
            };
            print!("{csv}");
            std::fs::write(&out, csv).map_err(CliError::io(&out))
        }
        Command::Gradcheck {
            head,
            steps,
            seed,
            corrupt_backward,
        } => {
            let rows = commands::gradcheck(head.into(), steps, seed, corrupt_backward)?;
            println!("{:<12} {:>12}  status", "group", "max_rel_err");
            let mut failed = Vec::new();
            for r in &rows {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<12} {:>12.3e}  {status}", r.group, r.max_rel_error);
                if !r.passed() {
                    failed.push(format!("{} ({:.3e})", r.group, r.max_rel_error));
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::GradCheck(failed.join(", ")))
            }
        }
    }
}
