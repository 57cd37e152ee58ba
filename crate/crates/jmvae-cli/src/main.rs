use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use jmvae_cli::commands::{cmd_eval, cmd_generate, cmd_latent_dump, cmd_train, EvalArgs, GenerateArgs};

/// Train and evaluate joint multimodal variational autoencoders.
#[derive(Parser)]
#[command(name = "jmvae", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run-config file.
    Train {
        /// Path to the `key = value` run configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Estimate a test lower bound over a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset selector, e.g. `toy:classes=10,dim=64,part=test` or
        /// `idx:images=PATH,labels=PATH`.
        #[arg(long)]
        dataset: String,
        /// marginal-x | conditional | joint
        #[arg(long)]
        target: String,
        /// single-x | single-w | multiple
        #[arg(long)]
        path: String,
        /// Importance-sample count.
        #[arg(long, default_value_t = 100)]
        k: usize,
        /// Prior samples for the log p(w) estimator.
        #[arg(long = "n-w", default_value_t = 5000)]
        n_w: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Sample images (PGM) and label probabilities (CSV) from the model.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// prior | from-w | from-x
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        /// Conditioning class for from-w (and cvae generation).
        #[arg(long)]
        class: Option<usize>,
        /// Conditioning image (binary PGM) for from-x.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Add zeta-scaled posterior noise instead of using the mean latent.
        #[arg(long)]
        sample: bool,
        #[arg(long, default_value_t = 0.6)]
        zeta: f64,
    },
    /// Export posterior means with labels as CSV for external plotting.
    LatentDump {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset selector (same syntax as eval).
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Eval { checkpoint, dataset, target, path, k, n_w, seed, out_dir } => {
            cmd_eval(&EvalArgs { checkpoint, dataset, target, path, k, n_w, seed, out_dir })
        }
        Command::Generate {
            checkpoint,
            mode,
            count,
            seed,
            out_dir,
            class,
            image,
            sample,
            zeta,
        } => cmd_generate(&GenerateArgs {
            checkpoint,
            mode,
            count,
            seed,
            out_dir,
            class,
            image,
            sample,
            zeta,
        }),
        Command::LatentDump { checkpoint, dataset, out } => {
            cmd_latent_dump(&checkpoint, &dataset, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
