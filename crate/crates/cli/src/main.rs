//! `ganda`: phantom generation, preprocessing, training, prediction and
//! analysis from one binary.

mod commands;
mod config;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ganda_core::{GandaError, SourceMode};

use crate::config::RunConfig;

/// Bad configuration, paths or arguments; maps to exit code 1.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

#[derive(Debug, Parser)]
#[command(name = "ganda", version, about = "Predict nanoparticle distributions from nuclei and vessel channels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Clone, Debug, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Input slide, dataset manifest, patch store or checkpoint, depending on
    /// the command. Repeatable.
    #[arg(long, global = true, value_name = "PATH")]
    pub input: Vec<PathBuf>,
    /// Master seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_name = "PX")]
    pub patch_size: Option<usize>,
    /// Source channels fed to the generator.
    #[arg(long, global = true, value_enum)]
    pub source: Option<SourceArg>,
    /// Emit SVG plots alongside the analysis report.
    #[arg(long, global = true)]
    pub plots: bool,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Nuclei,
    Vessel,
    Both,
}

impl From<SourceArg> for SourceMode {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Nuclei => SourceMode::Nuclei,
            SourceArg::Vessel => SourceMode::Vessel,
            SourceArg::Both => SourceMode::Both,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Phantom,
    /// Tile slides into a patch store, dropping empty tiles.
    Preprocess,
    /// Train a generator/discriminator pair on a patch store.
    Train {
        /// Continue from the newest epoch checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Predict the NP channel of slides and write merged slides.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Compare a real slide with its merged prediction.
    Analyze {
        /// Merged slide produced by `predict`.
        #[arg(long, value_name = "PATH")]
        merged: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            if code == 1 {
                eprintln!("run `ganda --help` for usage");
            }
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.common.config.as_deref())?;
    init_logging(cfg.log.as_deref());
    let deterministic = cli.common.deterministic || cfg.deterministic;
    let threads = cli.common.threads.or(cfg.threads).or(deterministic.then_some(1));
    if let Some(n) = threads {
        if n == 0 {
            return Err(UserError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = commands::Ctx { cfg, args: cli.common };
    match cli.command {
        Command::Phantom => commands::phantom(&ctx),
        Command::Preprocess => commands::preprocess(&ctx),
        Command::Train { resume } => commands::train(&ctx, resume),
        Command::Predict { checkpoint } => commands::predict(&ctx, checkpoint),
        Command::Analyze { merged } => commands::analyze(&ctx, merged),
    }
}

fn init_logging(config_level: Option<&str>) {
    let default = config_level.unwrap_or("info");
    let env = env_logger::Env::new().filter_or("GANDA_LOG", default);
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// 1 for user errors, 2 for runtime failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UserError>() {
            return 1;
        }
        if let Some(g) = cause.downcast_ref::<GandaError>() {
            return if is_user_error(g) { 1 } else { 2 };
        }
    }
    2
}

fn is_user_error(e: &GandaError) -> bool {
    use GandaError::*;
    matches!(
        e,
        MissingFile(_)
            | PlaneCountMismatch { .. }
            | DuplicateRole(_)
            | UnsupportedBitDepth(_)
            | MissingChannel(_)
            | InvalidSpec(_)
            | CorruptCheckpoint(_)
            | EmptyDataset
            | ChannelSpecMismatch { .. }
            | RegionOutOfBounds(_)
            | InvalidParams(_)
            | InvalidConfig(_)
            | Serde(_)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let user: anyhow::Error = UserError("x".into()).into();
        assert_eq!(exit_code(&user), 1);
        let missing: anyhow::Error = GandaError::MissingFile("a".into()).into();
        assert_eq!(exit_code(&missing.context("loading")), 1);
        let nan: anyhow::Error = GandaError::NonFiniteLoss {
            step: 3,
            detail: "g".into(),
        }
        .into();
        assert_eq!(exit_code(&nan), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 2);
    }

    #[test]
    fn flags_parse_after_subcommand() {
        let cli = Cli::try_parse_from([
            "ganda", "train", "--resume", "--source", "vessel", "--seed", "3", "--out", "o", "--input", "s",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Train { resume: true }));
        assert_eq!(cli.common.source, Some(SourceArg::Vessel));
        assert_eq!(cli.common.seed, Some(3));
        assert!(Cli::try_parse_from(["ganda", "train", "--source", "dapi"]).is_err());
    }
}
