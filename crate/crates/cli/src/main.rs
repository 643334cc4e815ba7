mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Intent, attitude and action forecasting from whole-body pose tracks.
#[derive(Debug, Parser)]
#[command(name = "egointent", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic track corpus from a spec file.
    Synth(SynthArgs),
    /// Expand a track file with an augmentation policy.
    Augment(AugmentArgs),
    /// Train a model; writes the log, best checkpoint and a report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a track file.
    Eval(EvalArgs),
    /// Run one of the ablation studies and emit its table.
    Ablate(AblateArgs),
    /// Per-track forecasts from a checkpoint.
    Predict(PredictArgs),
    /// Parameter count and single-window latency.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Output path (file or directory depending on the command).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Synthetic corpus spec (TOML).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Augmentation policy (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Input tracks (JSONL).
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Tracks (JSONL). Split by the config ratios unless --val is given.
    #[arg(long)]
    data: PathBuf,
    /// Separate validation tracks; disables splitting of --data.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Subset {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split manifest written by `train`; selects --subset of --data.
    #[arg(long, requires = "subset")]
    split: Option<PathBuf>,
    #[arg(long, value_enum, requires = "split")]
    subset: Option<Subset>,
    /// Observation window; defaults to the one the checkpoint was trained with.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    BodyParts,
    Hierarchy,
    WindowSize,
    TemporalModule,
    HoldoutGeneralisation,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    window: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Checkpoint to benchmark; without it a freshly initialised model from --config is used.
    #[arg(long, conflicts_with = "config")]
    checkpoint: Option<PathBuf>,
    /// Training config whose model section is benchmarked.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tracks to draw the timed window from; a synthetic track otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a.config, a.common.out, a.common.seed),
        Command::Augment(a) => commands::augment(&a.config, &a.data, a.common.out, a.common.seed),
        Command::Train(a) => commands::train(&a.config, &a.data, a.val.as_deref(), a.common.out, a.common.seed, a.window),
        Command::Eval(a) => {
            let subset = a.split.as_deref().zip(a.subset.map(|s| match s {
                Subset::Train => "train",
                Subset::Val => "val",
                Subset::Test => "test",
            }));
            commands::eval(&a.checkpoint, &a.data, subset, a.window, a.out)
        }
        Command::Ablate(a) => {
            let kind = match a.kind {
                Kind::BodyParts => egointent::training::AblationKind::BodyParts,
                Kind::Hierarchy => egointent::training::AblationKind::Hierarchy,
                Kind::WindowSize => egointent::training::AblationKind::WindowSize,
                Kind::TemporalModule => egointent::training::AblationKind::TemporalModule,
                Kind::HoldoutGeneralisation => egointent::training::AblationKind::HoldoutGeneralisation,
            };
            commands::ablate(kind, &a.config, &a.data, a.common.out, a.common.seed, a.window)
        }
        Command::Predict(a) => commands::predict(&a.checkpoint, &a.data, a.window, a.out),
        Command::Bench(a) => commands::bench(a.checkpoint.as_deref(), a.config.as_deref(), a.data.as_deref(), a.window, a.out),
    };
    match result {
        Ok(r) => {
            println!("{}", r.summary);
            if let Some(p) = &r.report {
                println!("report: {}", p.display());
            }
            ExitCode::from(r.exit_code)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
