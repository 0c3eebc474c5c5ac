use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mla_core::gradcheck::TOLERANCE;
use mla_core::Result;
use mla_forge::{commands, load_config, Options, RunConfig};

#[derive(Parser)]
#[command(
    name = "mla-forge",
    version,
    about = "Multilingual acquisition experiments on a synthetic world"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root for run and world directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated language tags.
    #[arg(long, value_delimiter = ',')]
    languages: Option<Vec<String>>,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct MaybeCheckpoint {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and store every corpus of the configured world.
    WorldGen(Common),
    /// Pre-train the native dual encoder.
    Pretrain(Common),
    /// Translation-pair stage on a pre-trained checkpoint.
    TrainNlt(WithCheckpoint),
    /// Image-text stage on a checkpoint.
    TrainLe(WithCheckpoint),
    /// Every configured stage in order, then evaluation.
    RunSchedule(MaybeCheckpoint),
    /// Add one language to a trained checkpoint.
    Extend(WithCheckpoint),
    /// Held-out retrieval metrics of a checkpoint.
    Eval(WithCheckpoint),
    /// Write embeddings of the evaluation split as TSV.
    ExportEmbeddings(WithCheckpoint),
    /// Finite-difference gradient check in 64-bit arithmetic.
    GradCheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn resolve(common: &Common, checkpoint: Option<PathBuf>) -> Result<(RunConfig, Options)> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.validate()?;
    }
    let opts = Options {
        checkpoint,
        out: common.out.clone(),
        languages: common.languages.clone(),
    };
    Ok((cfg, opts))
}

fn report_run(dir: PathBuf) {
    println!("run: {}", dir.display());
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::WorldGen(c) => {
            let (cfg, opts) = resolve(&c, None)?;
            let (dir, reused) = commands::world_gen(&cfg, &opts.out)?;
            println!(
                "{} {}",
                if reused { "reused" } else { "wrote" },
                dir.display()
            );
        }
        Command::Pretrain(c) => {
            let (cfg, opts) = resolve(&c, None)?;
            report_run(commands::pretrain(&cfg, &opts)?);
        }
        Command::TrainNlt(a) => {
            let (cfg, opts) = resolve(&a.common, Some(a.checkpoint))?;
            report_run(commands::train_nlt(&cfg, &opts)?);
        }
        Command::TrainLe(a) => {
            let (cfg, opts) = resolve(&a.common, Some(a.checkpoint))?;
            report_run(commands::train_le(&cfg, &opts)?);
        }
        Command::RunSchedule(a) => {
            let (cfg, opts) = resolve(&a.common, a.checkpoint)?;
            report_run(commands::schedule(&cfg, &opts)?);
        }
        Command::Extend(a) => {
            let (cfg, opts) = resolve(&a.common, Some(a.checkpoint))?;
            report_run(commands::extend(&cfg, &opts)?);
        }
        Command::Eval(a) => {
            let (cfg, opts) = resolve(&a.common, Some(a.checkpoint))?;
            let (dir, reports) = commands::eval(&cfg, &opts)?;
            println!("{}", mla_core::eval::CSV_HEADER);
            for r in &reports {
                println!("{}", r.csv_row());
            }
            report_run(dir);
        }
        Command::ExportEmbeddings(a) => {
            let (cfg, opts) = resolve(&a.common, Some(a.checkpoint))?;
            report_run(commands::export(&cfg, &opts)?);
        }
        Command::GradCheck { seed } => {
            let cases = commands::grad_check(seed)?;
            for c in &cases {
                println!("{:<40} {:.3e} ({} coords)", c.name, c.rel_error, c.coords);
            }
            let max = cases.iter().map(|c| c.rel_error).fold(0.0, f64::max);
            println!("max_rel_error={max:.3e}");
            if !(max < TOLERANCE) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
