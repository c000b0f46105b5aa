use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dvr_cli::commands::{cmd_align, cmd_bench, cmd_dereflect, cmd_eval, cmd_gen, Outcome};
use dvr_cli::{Failure, Inputs, RunConfig};

/// Dual-view reflection removal.
#[derive(Parser)]
#[command(name = "dvr", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, overriding the config (0 = one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct InputArgs {
    /// Dataset manifest written by `gen`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Two views of one scene (PNG or PFM).
    #[arg(long, num_args = 2, value_names = ["I1", "I2"])]
    pair: Option<Vec<PathBuf>>,
}

impl InputArgs {
    fn inputs(self) -> Inputs {
        match (self.manifest, self.pair) {
            (Some(m), _) => Inputs::Manifest(m),
            (None, Some(mut p)) => {
                let b = p.pop().expect("two values");
                let a = p.pop().expect("two values");
                Inputs::Pair(a, b)
            }
            (None, None) => unreachable!("clap enforces one input"),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dual-view dataset.
    Gen {
        /// Directory of source images; procedural sources when omitted.
        #[arg(long)]
        sources: Option<PathBuf>,
    },
    /// Estimate transmission flow for each pair.
    Align(InputArgs),
    /// Estimate the reflection-free first view of each pair.
    Dereflect(InputArgs),
    /// Score an earlier run against the manifest's ground truth.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory of an `align` or `dereflect` run.
        #[arg(long)]
        estimates: Option<PathBuf>,
    },
    /// Generate, dereflect and score the benchmark in one pass.
    Bench,
}

fn run(cli: Cli) -> Outcome<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::Config(vec![e]))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(out) = cli.out {
        cfg.paths.out = Some(out);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))?;
    match cli.command {
        Command::Gen { sources } => {
            if sources.is_some() {
                cfg.paths.sources = sources;
            }
            cmd_gen(&cfg).map(drop)
        }
        Command::Align(args) => cmd_align(&cfg, &args.inputs()).map(drop),
        Command::Dereflect(args) => cmd_dereflect(&cfg, &args.inputs()).map(drop),
        Command::Eval { manifest, estimates } => {
            if manifest.is_some() {
                cfg.paths.manifest = manifest;
            }
            if estimates.is_some() {
                cfg.paths.estimates = estimates;
            }
            cmd_eval(&cfg).map(drop)
        }
        Command::Bench => cmd_bench(&cfg).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            match &failure {
                Failure::Runtime(e) => eprintln!("error: {e:#}"),
                Failure::Config(errs) => {
                    eprintln!("invalid configuration:");
                    for e in errs {
                        eprintln!("  {e}");
                    }
                }
                Failure::Thresholds(errs) => {
                    eprintln!("thresholds violated:");
                    for e in errs {
                        eprintln!("  {e}");
                    }
                }
            }
            ExitCode::from(failure.exit_code())
        }
    }
}
