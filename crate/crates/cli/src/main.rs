use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use docseg::config::RunConfig;
use docseg::synthdoc::{generate_dataset, write_dataset};
use docseg::{eval, gradcheck, predict, train, Error, Result};
use serde_json::json;

/// Variable holding the log filter, e.g. `DOCSEG_LOG=debug`.
const LOG_ENV: &str = "DOCSEG_LOG";

#[derive(Debug, Parser)]
#[command(name = "docseg", version, about = "Document instance segmentation on synthetic layouts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run config whose `[synth]` section sets the page generator.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train from scratch or resume from a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Continue from a checkpoint with the decaying mask-weight schedule.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: PathBuf,
    },
    /// Mask and box AP of a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Segment one page image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        score_threshold: f64,
    },
    /// Finite-difference check of the training gradients.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn print(value: serde_json::Value) {
    println!("{value}");
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Synth { out, n, seed, config } => {
            let synth = match config {
                Some(p) => RunConfig::load(&p)?.synth,
                None => Default::default(),
            };
            synth.validate()?;
            if n == 0 {
                return Err(Error::Config("--n must be positive".into()));
            }
            let samples = generate_dataset(n, seed, &synth)?;
            let manifest = write_dataset(&samples, &synth.class_names(), &out)?;
            let instances: usize = manifest.samples.iter().map(|s| s.annotations.len()).sum();
            print(json!({ "out": out, "samples": manifest.samples.len(), "instances": instances }));
        }
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            print(serde_json::to_value(train::train(&cfg, resume.as_deref())?).expect("summary serializes"));
        }
        Command::Finetune { config, from } => {
            let cfg = RunConfig::load(&config)?;
            print(serde_json::to_value(train::finetune(&cfg, &from)?).expect("summary serializes"));
        }
        Command::Eval { ckpt, data } => {
            print(serde_json::to_value(eval::evaluate_checkpoint(&ckpt, &data)?).expect("report serializes"));
        }
        Command::Predict { ckpt, image, out, score_threshold } => {
            let res = predict::predict(&ckpt, &image, &out, score_threshold)?;
            print(json!({ "json": res.json, "overlay": res.overlay, "instances": res.file.instances.len() }));
        }
        Command::Gradcheck { config } => {
            let report = gradcheck::gradcheck(&RunConfig::load(&config)?)?;
            let passed = report.passed();
            print(json!({ "passed": passed, "report": report }));
            return Ok(passed);
        }
    }
    Ok(true)
}

fn exit_code(err: &Error) -> u8 {
    if err.is_validation() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            log::error!("gradient check exceeded its tolerance");
            ExitCode::from(2)
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

