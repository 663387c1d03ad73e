use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand};
use serde_json::{json, Value};

use seqcal_core::pipeline::{ExperimentConfig, Run};

#[derive(Parser, Debug)]
#[command(name = "seqcal", version, about = "Calibrate sequence likelihood toward consistency on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Root seed for every random choice in the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    Gen(Common),
    /// Fine-tune the model on the training split.
    Finetune(Common),
    /// Decode candidates on the training split and annotate them.
    Decode(Common),
    /// Calibrate the fine-tuned model on the annotated candidates.
    Calibrate(Common),
    /// Evaluate the fine-tuned and calibrated models.
    Eval(Common),
    /// Run the configured calibration sweeps.
    Sweep(Common),
    /// Extract Pareto frontiers from the sweep tables.
    Pareto(Common),
    /// Correlate sequence likelihood with consistency.
    Correlate(Common),
    /// Run every stage in order.
    Run(Common),
    /// Check every recorded artifact against its checksum.
    Verify(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gen(c)
            | Command::Finetune(c)
            | Command::Decode(c)
            | Command::Calibrate(c)
            | Command::Eval(c)
            | Command::Sweep(c)
            | Command::Pareto(c)
            | Command::Correlate(c)
            | Command::Run(c)
            | Command::Verify(c) => c,
        }
    }
}

fn load_config(path: &Path) -> seqcal_core::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| seqcal_core::Error::ConfigParse(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text)
}

fn execute(command: &Command) -> seqcal_core::Result<Value> {
    let common = command.common();
    let config = load_config(&common.config)?;
    if let Command::Run(_) = command {
        let manifest = seqcal_core::pipeline::run_experiment(&common.out, config, common.seed)?;
        return Ok(serde_json::to_value(manifest)?);
    }
    let mut run = Run::open(&common.out, config, common.seed)?;
    let value = match command {
        Command::Gen(_) => {
            run.gen()?;
            json!({ "stage": "gen" })
        }
        Command::Finetune(_) => serde_json::to_value(run.finetune()?)?,
        Command::Decode(_) => json!({ "histogram": run.decode_annotate()? }),
        Command::Calibrate(_) => {
            let log = run.calibrate()?;
            serde_json::to_value(log.last())?
        }
        Command::Eval(_) => serde_json::to_value(run.eval()?)?,
        Command::Sweep(_) => serde_json::to_value(run.sweep()?)?,
        Command::Pareto(_) => serde_json::to_value(run.pareto()?)?,
        Command::Correlate(_) => serde_json::to_value(run.correlate()?)?,
        Command::Verify(_) => {
            run.verify()?;
            json!({ "verified": run.manifest().stages.len() })
        }
        Command::Run(_) => unreachable!(),
    };
    Ok(value)
}

fn error_record(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_record("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(&cli.command) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
