use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scenetune::instructions::Split;
use scenetune::pipeline::{self, RunConfig};
use scenetune::Error;

/// Scene instruction tuning: ingest point clouds, build instruction data,
/// train the adapted model and evaluate it.
#[derive(Parser, Debug)]
#[command(name = "scenetune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the scenes directory.
    #[arg(long, global = true)]
    scenes: Option<PathBuf>,
    /// Output directory of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Summarize every scene file.
    Ingest {
        #[command(flatten)]
        common: Common,
    },
    /// Generate the instruction dataset.
    BuildDataset {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune the adapters.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Decode a split and score it.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load; defaults to the merged checkpoint of the run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Combine report.json files into one table.
    Report {
        /// Report files or directories containing report.json.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic scenes as PLY files.
    Fixtures {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        points: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let cfg = match &common.config {
        // A malformed config is a validation failure, not a runtime one.
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Parse { .. } => Error::Config(e.to_string()),
            e => e,
        })?,
        None => RunConfig::default(),
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    let mut cfg = cfg.with_seed(seed);
    if let Some(s) = &common.scenes {
        cfg.paths.scenes = s.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_or(common: &Common, default: &Path) -> PathBuf {
    common.out.clone().unwrap_or_else(|| default.to_path_buf())
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Ingest { common } => {
            let cfg = load_config(&common)?;
            let out = out_or(&common, &cfg.paths.summaries);
            let report = pipeline::ingest(&cfg.paths.scenes, &out)?;
            println!("{} summaries, {} errors", report.summaries.len(), report.errors.len());
            for e in &report.errors {
                eprintln!("{}: {}", e.file, e.message);
            }
            if !report.errors.is_empty() {
                eprintln!("error: {} scene file(s) failed to parse", report.errors.len());
                return Ok(ExitCode::from(2));
            }
        }
        Command::BuildDataset { common } => {
            let mut cfg = load_config(&common)?;
            cfg.paths.dataset = out_or(&common, &cfg.paths.dataset);
            let dataset = pipeline::build_dataset(&cfg)?;
            print!("{}", dataset.manifest.count_table());
            for w in &dataset.manifest.warnings {
                log::warn!("{w}");
            }
        }
        Command::Train { common } => {
            let mut cfg = load_config(&common)?;
            cfg.paths.checkpoints = out_or(&common, &cfg.paths.checkpoints);
            let outcome = pipeline::train(&cfg)?;
            println!(
                "trained {} parameters on {} examples; final loss {:.4}",
                outcome.trainable_params,
                outcome.examples,
                outcome.losses.last().copied().unwrap_or(f64::NAN)
            );
            println!("{}", outcome.merged_checkpoint.display());
        }
        Command::Evaluate {
            common,
            checkpoint,
            split,
        } => {
            let cfg = load_config(&common)?;
            let split = Split::parse(&split).ok_or_else(|| Error::Config(format!("unknown split '{split}'")))?;
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.paths.checkpoints.join(pipeline::MERGED_CHECKPOINT));
            let out = out_or(&common, &cfg.paths.reports);
            let report = pipeline::evaluate(&cfg, &checkpoint, split, &out)?;
            print!("{}", report.to_table());
        }
        Command::Report { reports, out } => {
            let table = pipeline::report(&reports)?;
            print!("{table}");
            if let Some(out) = out {
                std::fs::write(out, table)?;
            }
        }
        Command::Fixtures { common, count, points } => {
            let cfg = load_config(&common)?;
            let out = out_or(&common, &cfg.paths.scenes);
            let files = pipeline::write_fixtures(&out, count, cfg.seed, points)?;
            println!("wrote {} scenes to {}", files.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SCENETUNE_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
