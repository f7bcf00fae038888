use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flare_cli::commands::{self, EvalOptions, ModelSelection};
use flare_cli::{load_config, CheckpointChoice, CliError};
use flare_core::model::ModelConfig;

#[derive(Parser)]
#[command(name = "flare", version, about = "Disease-stage forecasting with latent rollout")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set training.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort CSV and its manifest.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one or both models into a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        model: ModelSelection,
    },
    /// Evaluate trained checkpoints on the run's test split.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        model: ModelSelection,
        /// Which saved weights to score (defaults to the config's `eval.checkpoint`).
        #[arg(long, value_enum)]
        checkpoint: Option<CheckpointChoice>,
        /// Score this checkpoint file instead (requires a single --model).
        #[arg(long)]
        checkpoint_path: Option<PathBuf>,
        /// Output directory (defaults to `<run-dir>/<model>/eval_<checkpoint>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck {
        /// Take the model section from this config (must be tiny).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb this block's analytic gradient (checker self-test).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Print augmented sample counts per (T, tau) and split.
    Buckets {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Synth { cfg, out: path } => {
            let cfg = load_config(cfg.config.as_deref(), &cfg.overrides)?;
            commands::cmd_synth(&cfg, &path, &mut out)?;
        }
        Command::Train { cfg, run_dir, model } => {
            let cfg = load_config(cfg.config.as_deref(), &cfg.overrides)?;
            commands::cmd_train(&cfg, &run_dir, model, &mut out)?;
        }
        Command::Eval {
            run_dir,
            model,
            checkpoint,
            checkpoint_path,
            out: out_dir,
        } => {
            let opts = EvalOptions {
                models: model,
                checkpoint,
                checkpoint_path,
                out_dir,
            };
            commands::cmd_eval(&run_dir, &opts, &mut out)?;
        }
        Command::Gradcheck {
            config,
            overrides,
            seed,
            corrupt,
        } => {
            let model = model_section(config, &overrides)?;
            commands::cmd_gradcheck(&model, seed, corrupt.as_deref(), &mut out)?;
        }
        Command::Buckets { cfg } => {
            let cfg = load_config(cfg.config.as_deref(), &cfg.overrides)?;
            commands::cmd_buckets(&cfg, &mut out)?;
        }
    }
    out.flush().map_err(CliError::from)
}

/// Reads only the `model` section, overlaid on the tiny config.
fn model_section(path: Option<PathBuf>, overrides: &[String]) -> Result<ModelConfig, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => serde_json::json!({}),
    };
    for o in overrides {
        flare_cli::config::apply_override(&mut doc, o)?;
    }
    let mut model = serde_json::to_value(ModelConfig::tiny()).expect("serializes");
    if let Some(section) = doc.get_mut("model").map(serde_json::Value::take) {
        flare_cli::config::merge(&mut model, section);
    }
    serde_json::from_value(model).map_err(|e| CliError::Config(format!("model: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
