mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "fsnas", version, about = "Weight-sharing NAS: super-net training, few-shot splitting, ranking")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Overrides the initialization, training and oracle seeds of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run configuration (JSON), or a run manifest whose snapshot should be repeated.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, env = "FSNAS_OUT_DIR", default_value = "fsnas-out")]
    pub out_dir: PathBuf,
    /// Disables internal parallelism.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads for oracle training.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Suppresses progress lines on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Search-space facts.
    Space {
        #[command(subcommand)]
        cmd: SpaceCmd,
    },
    /// Super-net training.
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// End-to-end pipelines.
    Run {
        #[command(subcommand)]
        cmd: RunCmd,
    },
    /// Group plans.
    Split {
        #[command(subcommand)]
        cmd: SplitCmd,
    },
    /// Per-group learning-rate multipliers.
    Lr {
        #[command(subcommand)]
        cmd: LrCmd,
    },
    /// Stand-alone training of the eval set.
    Oracle {
        #[command(subcommand)]
        cmd: OracleCmd,
    },
    /// Ranking evaluation.
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// Per-epoch ranking traces.
    Trace {
        #[command(subcommand)]
        cmd: TraceCmd,
    },
    /// Super-net checkpoints.
    Checkpoint {
        #[command(subcommand)]
        cmd: CheckpointCmd,
    },
}

#[derive(Subcommand, Debug)]
pub enum SpaceCmd {
    /// Candidate sets, group capacities and size of a search space.
    Info {
        /// Space JSON file or preset name (desk-small, resnet48-track1).
        #[arg(long)]
        space: Option<String>,
        /// Also print the content hash of the configured dataset.
        #[arg(long)]
        data: bool,
    },
}

#[derive(Subcommand, Debug)]
pub enum TrainCmd {
    /// Trains the single-group super-net.
    OneShot,
    /// Splits a checkpoint and trains the following stages.
    FewShot {
        /// Checkpoint to split from.
        #[arg(long)]
        from: PathBuf,
        /// Last group count to train; defaults to one split.
        #[arg(long)]
        to: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
pub enum RunCmd {
    /// Oracles, one-shot and every few-shot stage, with reports and a summary.
    Progressive,
}

#[derive(Subcommand, Debug)]
pub enum SplitCmd {
    /// Group partition of every stage after splitting to `--group`.
    Plan {
        #[arg(long)]
        space: Option<String>,
        #[arg(long, default_value_t = 1)]
        group: usize,
    },
}

#[derive(Subcommand, Debug)]
pub enum LrCmd {
    /// Multipliers at group count `--group`, from a preset table or the configured rule.
    Plan {
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        group: usize,
        #[arg(long)]
        space: Option<String>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Preset {
    Table2,
}

#[derive(Subcommand, Debug)]
pub enum OracleCmd {
    /// Samples the eval set and trains each architecture from scratch.
    Run,
}

#[derive(Subcommand, Debug)]
pub enum EvalCmd {
    /// Ranks inherited against oracle accuracy for one checkpoint.
    Rank {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Eval set with oracle accuracies; defaults to `<out-dir>/eval_set.json`.
        #[arg(long)]
        eval_set: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum TraceCmd {
    /// Prints a stage's per-epoch Kendall trace.
    Export {
        /// Run directory (or a stage directory holding trace.json).
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 1)]
        group: usize,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
pub enum CheckpointCmd {
    /// Verifies a checkpoint and prints its plan and size.
    Inspect { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let first = match e.kind() {
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => "missing subcommand",
                _ => text
                    .lines()
                    .find(|l| !l.trim().is_empty())
                    .unwrap_or("invalid arguments")
                    .trim_start_matches("error: "),
            };
            eprintln!("E_USAGE: {first} (see --help)");
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::from(if matches!(e, fsnas::Error::Usage(_)) { 2 } else { 1 })
        }
    }
}
