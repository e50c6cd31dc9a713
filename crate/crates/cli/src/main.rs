//! `ssn`: synthesize data, train, evaluate, query and inspect the model.
//!
//! Errors are reported as one line on stderr, `error[<kind>]: <message>`,
//! with exit status 2 for configuration and argument problems, 3 for data,
//! file and checkpoint problems and 4 for numeric failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssn_core::{SsnError, Variant};

#[derive(Parser, Debug)]
#[command(name = "ssn", version, about = "Semantic-shift composed image retrieval", after_help = config::KEYS_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand; each overrides the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat JSON run configuration (keys listed under --help)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for initialization, shuffling and noise; mandatory when CI is set
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for artifacts [default: runs]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// SSNF file with training triplets
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// SSNF file with evaluation triplets
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epochs between learning-rate decays, 0 disables decay
    #[arg(long)]
    pub lr_decay_every: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// true or false
    #[arg(long)]
    pub use_kl: Option<bool>,
    /// Drop each query's reference image from its ranking
    #[arg(long)]
    pub exclude_reference: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic fixture as train.ssnf and test.ssnf
    Synth {
        /// Triplets assigned to train.ssnf; the rest go to test.ssnf
        #[arg(long, default_value_t = 512)]
        n_train: usize,
        /// JSON object of generator settings (seed, n_items, d, d_raw, n_triplets,
        /// slots, values_per_slot, patches_per_slot, clutter_patches, keep_cues, noise)
        #[arg(long)]
        synth_config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and write checkpoint.ssnc and loss.csv
    Train {
        /// Continue from a checkpoint instead of initializing
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write report.json and report.txt for a checkpoint
    Eval {
        /// Checkpoint file [default: <out_dir>/checkpoint.ssnc]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also evaluate with Gaussian noise of this relative scale on the references
        #[arg(long)]
        sigma: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the top-K gallery ids for one (reference, text) query
    Query {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        reference: u64,
        #[arg(long)]
        text: u64,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Write <text_id>_cr.pgm image-gate heatmaps for evaluation queries
    Heatmap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated text ids; all evaluation queries when omitted
        #[arg(long, value_delimiter = ',')]
        queries: Vec<u64>,
        /// Grid as WIDTHxHEIGHT; the most nearly square factorization when omitted
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        upscale: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every parameter gradient on a toy model
    Gradcheck {
        /// Only f64 is supported
        #[arg(long, default_value = "f64")]
        precision: String,
        /// Pass threshold on the worst relative error
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &SsnError) -> u8 {
    match e {
        SsnError::Config(_)
        | SsnError::Argument(_)
        | SsnError::Model(_)
        | SsnError::Dimension(_) => 2,
        SsnError::Numeric(_) | SsnError::UnsupportedOp(_) => 4,
        _ => 3,
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::*;
            if matches!(e.kind(), DisplayHelp | DisplayVersion | DisplayHelpOnMissingArgumentOrSubcommand) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[argument]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Synth { n_train, synth_config, common } => commands::synth(&common, n_train, synth_config.as_deref()),
        Command::Train { resume, common } => commands::train(&common, resume.as_deref()),
        Command::Eval { checkpoint, sigma, common } => commands::eval(&common, checkpoint.as_deref(), sigma),
        Command::Query { checkpoint, reference, text, top_k, common } => {
            commands::query(&common, checkpoint.as_deref(), reference, text, top_k)
        }
        Command::Heatmap { checkpoint, queries, grid, upscale, common } => {
            commands::heatmap(&common, checkpoint.as_deref(), &queries, grid.as_deref(), upscale)
        }
        Command::Gradcheck { precision, tolerance, common } => commands::gradcheck(&common, &precision, tolerance),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}
