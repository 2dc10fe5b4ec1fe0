use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scalefusion_cli::commands::{cmd_analyze, cmd_finetune, cmd_pretrain, cmd_schedule};
use scalefusion_cli::{CliError, CliResult, Overrides, RunConfig};

/// Multi-scale time series representation learning.
#[derive(Parser)]
#[command(name = "scalefusion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; overrides SCALEFUSION_OUT_DIR and the config file.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Root seed; overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(
            &self.config,
            &Overrides {
                output_dir: self.output_dir.clone(),
                seed: self.seed,
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining; writes a checkpoint, a step log and a summary.
    Pretrain(Common),
    /// Fine-tunes task heads on a pretrained backbone.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Backbone checkpoint; defaults to pretrain.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Feature-redundancy report on deepest-layer features of the test split.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to analyze; defaults to pretrain.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Prints the pyramid schedule for one input length.
    Schedule {
        /// Input length.
        length: usize,
        /// Run configuration whose `[model]` section is used; defaults otherwise.
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Pretrain(common) => {
            let out = cmd_pretrain(&common.load()?)?;
            let s = &out.summary;
            println!(
                "pretrained on {} inputs: total loss {:.6} -> {:.6}",
                s.samples, s.initial.total, s.final_loss.total
            );
            println!("checkpoint {} ({})", s.checkpoint.display(), s.checkpoint_hash);
        }
        Command::Finetune { common, checkpoint } => {
            let summary = cmd_finetune(&common.load()?, checkpoint.as_deref())?;
            for run in &summary.runs {
                let t = &run.test;
                match (t.mse, t.accuracy) {
                    (Some(mse), _) => {
                        let base = run.baseline.as_ref().map_or(f64::NAN, |b| b.mse);
                        println!(
                            "{:?}: test mse {mse:.6} mae {:.6} (repeat-last mse {base:.6})",
                            run.task,
                            t.mae.unwrap_or(f64::NAN)
                        );
                    }
                    (None, Some(acc)) => println!(
                        "{:?}: test accuracy {acc:.4} macro-F1 {:.4}",
                        run.task,
                        t.macro_f1.unwrap_or(f64::NAN)
                    ),
                    _ => {}
                }
            }
        }
        Command::Analyze { common, checkpoint } => {
            let out = cmd_analyze(&common.load()?, checkpoint.as_deref())?;
            print!("{}", out.text);
            println!("report written to {}", out.path.display());
        }
        Command::Schedule { length, config } => {
            let model = match config {
                Some(path) => RunConfig::load(&path, &Overrides::default())?.model,
                None => Default::default(),
            };
            print!("{}", cmd_schedule(&model, length)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            log::error!("{e}");
            report_chain(&e);
            ExitCode::from(code as u8)
        }
    }
}

fn report_chain(e: &CliError) {
    let mut source = std::error::Error::source(e);
    while let Some(s) = source {
        log::error!("  caused by: {s}");
        source = s.source();
    }
}
