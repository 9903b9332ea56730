use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairlong::evaluation::EvalSetting;
use fairlong::io::{cmd_evaluate, cmd_generate, cmd_report, cmd_train, ExperimentConfig, TrainPhase};
use fairlong::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fairlong",
    version,
    about = "Long-term fairness experiments from a single seed"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the dataset and freeze the ground-truth classifier.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit one phase: phase1, rcgan, deeplf or baseline-{plain,dp,eo}.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        phase: TrainPhase,
        /// Exit with code 4 when repeated gradient descent stops without converging.
        #[arg(long)]
        strict: bool,
    },
    /// Evaluate classifier checkpoints on the test cohort.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// 1: steps 1..=10 from the test cohort. 2: steps 10..=19 after advancing it.
        /// Without this flag the `[evaluation]` section of the config is used.
        #[arg(long)]
        setting: Option<u8>,
        /// Classifier checkpoints; defaults to every trained classifier in the output directory.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
    },
    /// Summarize every comparison table as markdown.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = load(&common)?;
            for p in cmd_generate(&cfg, &common.out)? {
                println!("wrote {}", p.display());
            }
            Ok(0)
        }
        Command::Train { common, phase, strict } => {
            let cfg = load(&common)?;
            let summary = cmd_train(&cfg, phase, &common.out)?;
            for p in &summary.checkpoints {
                println!("wrote {}", p.display());
            }
            println!("wrote {}", summary.log.display());
            if let Some(last) = summary.history.last() {
                println!("{} round {}: loss {:.6}", last.phase, last.round, last.loss);
            }
            if !summary.converged {
                eprintln!("warning: {} stopped at its round limit before converging", phase.name());
                if strict {
                    return Ok(4);
                }
            }
            Ok(0)
        }
        Command::Evaluate {
            common,
            setting,
            models,
        } => {
            let cfg = load(&common)?;
            let setting = match setting {
                None => cfg.evaluation.clone(),
                Some(1) => EvalSetting::setting1(),
                Some(2) => EvalSetting::setting2(),
                Some(other) => {
                    return Err(Error::Validation {
                        field: "setting".into(),
                        reason: format!("expected 1 or 2, got {other}"),
                    })
                }
            };
            let (_, table) = cmd_evaluate(&cfg, &common.out, &setting, &models)?;
            println!("steps {}..={}", table.range[0], table.range[1]);
            for r in &table.rows {
                println!(
                    "{:<8} accuracy {:.4}  local {:.4}  long-term {:.4}",
                    r.model, r.mean_accuracy, r.mean_local_unfairness, r.long_term_j1
                );
            }
            Ok(0)
        }
        Command::Report { common } => {
            load(&common)?;
            print!("{}", cmd_report(&common.out)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
