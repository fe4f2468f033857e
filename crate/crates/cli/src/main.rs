//! Command-line entry points for the UMTL pipeline. Every output goes under
//! `UMTL_RUN_DIR`; `UMTL_THREADS` bounds parallelism.

mod commands;
mod manifest;
mod render;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "umtl", version, about = "Unsupervised mutual transformer learning for whole-slide images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set thresholds.beta_r=0.4`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a seeded corpus.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output name under the run directory.
        #[arg(long)]
        out: String,
    },
    /// Tile images into a corpus of unlabeled bags.
    Tile {
        #[command(flatten)]
        config: ConfigArgs,
        /// PNG or PNM image; repeat for several slides.
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: String,
    },
    /// Train in the mode selected by `run.mode`.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory or manifest.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: String,
        /// Continue from a saved iteration of the same run.
        #[arg(long)]
        resume: Option<usize>,
    },
    /// Score held-out bags of a trained run.
    Evaluate {
        /// Run name under the run directory.
        #[arg(long)]
        run: String,
        /// Use this corpus instead of the one recorded by the run.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Saved iteration to evaluate; defaults to the last.
        #[arg(long)]
        iteration: Option<usize>,
    },
    /// Compare pipeline variants with components removed or substituted.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: String,
        /// Variant names (UMTL, UMTL_v1..UMTL_v5, TLC_C, Auto-MLP); all when empty.
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
    /// Instance AUC against the fraction of slide labels revealed.
    WeakCurve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: String,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
        fractions: Vec<f64>,
    },
    /// Fine-tune a subtype head on positives found by a frozen run.
    Subtype {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// Finished unsupervised run to take the frozen model from.
        #[arg(long)]
        run: String,
        #[arg(long)]
        out: String,
    },
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error E_USAGE: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    if let Err(e) = settings::configure_threads() {
        eprintln!("error {}: {}", e.code(), one_line(&e.to_string()));
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Command::Generate { config, out } => commands::generate(config.config.as_deref(), &config.sets, out),
        Command::Tile { config, images, out } => commands::tile(config.config.as_deref(), &config.sets, images, out),
        Command::Train {
            config,
            corpus,
            out,
            resume,
        } => commands::train(config.config.as_deref(), &config.sets, corpus, out, *resume),
        Command::Evaluate { run, corpus, iteration } => commands::evaluate(run, corpus.as_deref(), *iteration),
        Command::Ablate {
            config,
            corpus,
            out,
            variants,
        } => commands::ablate(config.config.as_deref(), &config.sets, corpus, out, variants),
        Command::WeakCurve {
            config,
            corpus,
            out,
            fractions,
        } => commands::weak_curve(config.config.as_deref(), &config.sets, corpus, out, fractions),
        Command::Subtype { config, corpus, run, out } => {
            commands::subtype(config.config.as_deref(), &config.sets, corpus, run, out)
        }
    };
    match result {
        Ok(done) => {
            println!("ok {}: {}", done.dir.display(), done.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error {}: {}", e.code(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
