use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use synthsae_cli::commands::{self, BenchArgs, Common, EvalArgs, SampleArgs};
use synthsae_cli::config::env_overrides;
use synthsae_cli::{report, CliError, CliResult};

/// Synthetic SAE benchmark: build models, train and evaluate SAEs.
///
/// Any config key can be overridden from the environment as
/// SYNTHSAE_<SECTION>__<KEY>=<value>, e.g. SYNTHSAE_TRAIN__BATCH_SIZE=256.
#[derive(Debug, Parser)]
#[command(name = "synthsae", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Experiment config (TOML).
    #[arg(long, global = true, env = "SYNTHSAE_CONFIG")]
    config: Option<PathBuf>,
    /// Run seed; replaces the config's seed list (model seed for generate-model).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SYNTHSAE_THREADS")]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a synthetic model and print its summary.
    GenerateModel,
    /// Dump activations (and optionally ground truth) from a model.
    Sample {
        /// Saved model; otherwise the config's model is built.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(short = 'n', long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 1024)]
        batch_size: usize,
        /// Also store the sparse ground-truth coefficients.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Train SAEs for every seed (and sweep point) in the config.
    Train,
    /// Evaluate a trained SAE against a model.
    Eval {
        #[arg(long)]
        sae: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Measure sampling throughput.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Feature counts to rebuild the model at, e.g. 1024,4096.
        #[arg(long = "n-features", value_delimiter = ',')]
        n_features: Vec<usize>,
        #[arg(long, default_value_t = 1024)]
        batch_size: usize,
        /// Timed batches, plus one warmup.
        #[arg(long, default_value_t = 10)]
        batches: usize,
        /// Keep the configured orthogonalization when rebuilding.
        #[arg(long)]
        keep_ortho: bool,
    },
    /// Aggregate a run directory into summary and plot-data CSVs.
    Report {
        run_dir: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let common = Common {
        config: cli.global.config,
        seed: cli.global.seed,
        out: cli.global.out,
        env: env_overrides(std::env::vars())?,
    };
    match cli.command {
        Command::GenerateModel => commands::generate_model(&common).map(drop),
        Command::Sample { model, n, batch_size, ground_truth } => {
            commands::sample(&common, &SampleArgs { model, n, batch_size, ground_truth }).map(drop)
        }
        Command::Train => commands::train_cmd(&common).map(drop),
        Command::Eval { sae, model } => commands::eval_cmd(&common, &EvalArgs { sae, model }).map(drop),
        Command::Bench { model, n_features, batch_size, batches, keep_ortho } => commands::bench(
            &common,
            &BenchArgs {
                model,
                n_features,
                batch_size,
                batches: batches + 1,
                keep_ortho,
            },
        )
        .map(drop),
        Command::Report { run_dir } => report::report(&run_dir, common.out.as_deref()).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("synthsae: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
