//! Command-line entry point: `train`, `eval`, `infer`, `filter`, `synth`,
//! `gradcheck` and `ablate`.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

pub use config::{CliConfig, DataConfig, EvalConfig};

/// Environment variable selecting the log level: `quiet`, `info` or `debug`.
pub const LOG_ENV: &str = "MSDA_LOG";

/// Exit code for a failed operation.
pub const EXIT_FAILURE: i32 = 1;
/// Exit code for a malformed command line.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "msda", version, about = "Infrared small-target segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a config; writes checkpoints and the training log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on an image/mask directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Supplies the `eval` section and `data.resize_to`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write 16-bit probability maps.
        #[arg(long)]
        probs: bool,
    },
    /// Predict the mask of one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the 16-bit probability map here.
        #[arg(long)]
        probs: Option<PathBuf>,
    },
    /// Write the three stride-2 directional high-pass maps of an image.
    Filter {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset in the `images/` + `masks/` layout.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.count`.
        #[arg(long)]
        count: Option<usize>,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the gradient-check suite; fails if any check exceeds tolerance.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate with ablation switches applied.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// `NAME=on|off`, repeatable.
        #[arg(long = "switch", required = true, num_args = 1..)]
        switches: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate here instead of on the training samples.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn init_logging() {
    let level = match std::env::var(LOG_ENV).as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok("info") | Err(_) => log::LevelFilter::Info,
        Ok(other) => {
            eprintln!("{LOG_ENV}={other:?} is not one of quiet, info, debug; using info");
            log::LevelFilter::Info
        }
    };
    // A second call in the same process keeps the first logger.
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
    log::set_max_level(level);
}

fn dispatch(command: Command) -> anyhow::Result<bool> {
    use commands as c;
    match command {
        Command::Train { config, out, seed } => c::train(&config, &out, seed)?,
        Command::Eval {
            checkpoint,
            data,
            out,
            config,
            probs,
        } => c::eval(&checkpoint, &data, &out, config.as_deref(), probs)?,
        Command::Infer {
            checkpoint,
            image,
            out,
            probs,
        } => c::infer(&checkpoint, &image, &out, probs.as_deref())?,
        Command::Filter { image, out } => c::filter(&image, &out)?,
        Command::Synth {
            config,
            out,
            count,
            seed,
        } => c::synth(&config, &out, count, seed)?,
        Command::Gradcheck { seed } => return c::gradcheck(seed),
        Command::Ablate {
            config,
            switches,
            out,
            eval_data,
            seed,
        } => c::ablate(&config, &switches, &out, eval_data.as_deref(), seed)?,
    }
    Ok(true)
}

/// Runs one command given its arguments without the program name; returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args = std::iter::once(OsString::from("msda")).chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
        }
    };
    init_logging();
    match dispatch(cli.command) {
        Ok(true) => 0,
        Ok(false) => {
            log::error!("gradient check failed");
            EXIT_FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}
