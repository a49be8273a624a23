use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eflow_bench::{SweepSpec, ThroughputSpec};
use eflow_cli::commands::{self, SampleArgs, Verdict};
use eflow_cli::RunConfig;

#[derive(Parser)]
#[command(name = "eflow", version, about = "Few-step solution-flow training, sampling and verification")]
struct Cli {
    /// Swap in a deliberately broken fixture (oracle, gradcheck).
    #[arg(long, global = true, hide = true)]
    inject_fault: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the 2D mixture; writes metrics.csv, config.toml and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate points from a checkpoint as `x,y,label` CSV.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sampling steps; defaults to the checkpoint's `sample.steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Guidance scale; defaults to `sample.w_inf`.
        #[arg(long)]
        w: Option<f64>,
        /// Override a `sample.*` key, e.g. `--set sample.method=euler`.
        #[arg(long, value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "samples.csv")]
        out: PathBuf,
    },
    /// Check the residual/defect identity and the error-bound certificates.
    Oracle {
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and loss.
    Gradcheck {
        /// Skip the three full losses.
        #[arg(long)]
        primitives_only: bool,
    },
    /// Latency and throughput sweeps.
    #[command(subcommand)]
    Bench(Bench),
    /// Print the default configuration.
    Defaults,
}

#[derive(Subcommand)]
enum Bench {
    /// Attention forward latency against token count.
    Latency {
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long)]
        variants: Option<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Training iterations per second for each cumulative recipe.
    Throughput {
        #[arg(long, default_value_t = 2)]
        iters: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<Verdict> {
    match cli.command {
        Command::Train { config, out, resume } => commands::train(config.as_deref(), &out, resume.as_deref()).map(|_| Verdict::Pass),
        Command::Sample { checkpoint, steps, count, class, seed, w, set, out } => {
            commands::sample(&SampleArgs { checkpoint, steps, count, class, seed, w, set, out }).map(|_| Verdict::Pass)
        }
        Command::Oracle { report } => commands::oracle(report.as_deref(), cli.inject_fault),
        Command::Gradcheck { primitives_only } => commands::gradcheck(!primitives_only, cli.inject_fault),
        Command::Bench(Bench::Latency { counts, variants, repeats, warmup, seed, out }) => {
            let mut spec = SweepSpec { repeats, warmup, seed, ..SweepSpec::default() };
            if let Some(c) = counts {
                spec.counts = c;
            }
            if let Some(v) = variants {
                spec.variants = commands::parse_variants(&v)?;
            }
            commands::bench_latency(&spec, out.as_deref()).map(|_| Verdict::Pass)
        }
        Command::Bench(Bench::Throughput { iters, repeats, batch, seed, out }) => {
            let spec = ThroughputSpec { iters, repeats, batch, seed, ..ThroughputSpec::default() };
            commands::bench_throughput(&spec, out.as_deref()).map(|_| Verdict::Pass)
        }
        Command::Defaults => {
            print!("{}", RunConfig::default().render());
            Ok(Verdict::Pass)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
