use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fpt::commands;
use fpt::data::Split;

#[derive(Parser)]
#[command(name = "fpt", version, about = "Frozen high-resolution backbone, small learnable side network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic texture-stamp dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 512)]
        high_res: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Validation images (default n/8).
        #[arg(long)]
        val: Option<usize>,
        /// Test images (default n/5).
        #[arg(long)]
        test: Option<usize>,
    },
    /// Write seeded LPM weights for the configured backbone.
    InitLpm {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the frozen LPM once per image and store the selected features.
    Preload {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the side network from cached features.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// AUC of a trained side network on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Parameter census, memory peaks and efficiency scores.
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Score the triple (score, r, m) directly.
        #[arg(long, num_args = 3, value_names = ["SCORE", "R", "M"])]
        table1: Option<Vec<f64>>,
        #[arg(long, default_value_t = 100.0)]
        score: f64,
        #[arg(long)]
        skip_memory: bool,
    },
    /// Export the selected-token raster of one cached image.
    Viz {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Side layer, 1-based (default: the last).
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cmd: Command) -> fpt::Result<String> {
    use commands::config_or_default as cfg;
    match cmd {
        Command::Synth { out, n, classes, high_res, seed, val, test } => {
            commands::synth(&out, n, classes, high_res, seed, val.unwrap_or(n / 8), test.unwrap_or(n / 5))
        }
        Command::InitLpm { config, out } => commands::init_lpm(&cfg(config.as_deref())?, &out),
        Command::Preload { data, weights, config, out } => {
            commands::preload(&data, &weights, &cfg(config.as_deref())?, &out)
        }
        Command::Train { data, cache, config, out, log } => {
            commands::train(&data, cache.as_deref(), &cfg(config.as_deref())?, &out, &log)
        }
        Command::Eval { data, cache, model, split, config } => {
            commands::eval(&data, cache.as_deref(), &model, Split::parse(&split)?, &cfg(config.as_deref())?)
        }
        Command::Profile { config, table1, score, skip_memory } => match table1.as_deref() {
            Some(&[s, r, m]) => Ok(commands::table1(s, r, m)),
            _ => commands::profile(&cfg(config.as_deref())?, score, skip_memory),
        },
        Command::Viz { image, cache, out, layer, model, config } => {
            commands::viz(&image, &cache, &out, layer, model.as_deref(), &cfg(config.as_deref())?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
