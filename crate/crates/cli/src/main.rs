use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clozefit_cli::commands::{self, ablation_table};
use clozefit_cli::config::Settings;

#[derive(Parser)]
#[command(
    name = "clozefit",
    about = "Few-shot cloze fine-tuning: pattern-verbalizer templates over a tiny masked LM",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of flat dotted keys (key = value per line).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, repeatable (e.g. --set train.lr=1e-3).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override both train.seed and model.seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn settings(&self) -> anyhow::Result<Settings> {
        let mut settings = match &self.config {
            Some(path) => Settings::from_file(path)?,
            None => Settings::default(),
        };
        settings.apply_overrides(&self.set)?;
        if let Some(seed) = self.seed {
            settings.set_master_seed(seed);
        }
        Ok(settings)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune a model and persist the run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output run directory (created fresh unless --resume).
        #[arg(long)]
        out: PathBuf,
        /// Allow writing into an existing run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a persisted run on a data file (default: its dev split).
    Eval {
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Data file to score instead of the run's dev split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run an ablation arm set and emit a comparison table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Average the logits of several runs' best checkpoints and score them.
    Ensemble {
        /// Run directories produced by `train`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Data file to score instead of the first run's dev split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate synthetic task data files.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, out, resume } => {
            let settings = config.settings()?;
            let summary = commands::cmd_train(&settings, &out, resume)?;
            println!(
                "run {}: best batch {} ({} = {:.4})",
                summary.run_dir.display(),
                summary.history.best_batch,
                summary.history.evals.first().map(|e| e.metric.as_str()).unwrap_or("metric"),
                summary.history.best_value,
            );
            println!("dev: {}", serde_json::to_string(&summary.dev_report)?);
            if let Some(test) = &summary.test_report {
                println!("test: {}", serde_json::to_string(test)?);
            }
        }
        Command::Eval { run, data } => {
            let report = commands::cmd_eval(&run, data.as_deref())?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Ablate { config, out, resume } => {
            let settings = config.settings()?;
            let rows = commands::cmd_ablate(&settings, &out, resume)?;
            print!("{}", ablation_table(&rows));
        }
        Command::Ensemble { runs, data } => {
            let report = commands::cmd_ensemble(&runs, data.as_deref())?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Generate { config, out, resume } => {
            let settings = config.settings()?;
            let data = commands::cmd_generate(&settings, &out, resume)?;
            println!(
                "generated {} train / {} dev / {} test examples for {} in {}",
                data.train.len(),
                data.dev.len(),
                data.test.len(),
                data.task,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // One line, machine-parseable.
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
