//! `arwkv`: drives the conversion pipeline from the shell, one stage per
//! subcommand, with files as the only interface between stages.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "arwkv", version, about = "Attention-to-RWKV-7 conversion lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic character corpus (train.bin, heldout.bin).
    GenData(GenDataArgs),
    /// Train a model from scratch with next-token cross-entropy.
    TrainTeacher(TrainArgs),
    /// Align recurrent mixers to a teacher's attention outputs.
    Align(AlignArgs),
    /// Distill a student from a teacher with word-level KL.
    Distill(DistillArgs),
    /// Fine-tune a student at a longer context.
    Sft(SftArgs),
    /// Score one checkpoint.
    Eval(EvalArgs),
    /// Score several checkpoints into an ablation table.
    Report(ReportArgs),
    /// Summarise a checkpoint, training-state or corpus file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Flags shared by every training stage.
#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output model checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Metrics JSONL; defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Training corpus; overrides `data.train_path`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Continue from a training-state file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write parameters plus optimizer state here.
    #[arg(long)]
    save_state: Option<PathBuf>,
    /// Stop after this many total steps instead of `train.max_steps`.
    #[arg(long)]
    stop_at: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    teacher: PathBuf,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    teacher: PathBuf,
    /// Stage-one output, an earlier student, or the teacher itself to skip
    /// alignment.
    #[arg(long)]
    student: PathBuf,
}

#[derive(Args, Debug)]
struct SftArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    student: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Teacher for the KL metric.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Held-out corpus; overrides `data.heldout_path`.
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Write the metrics JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated checkpoints, one column each.
    #[arg(long, value_delimiter = ',', required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Text table; printed to stdout when absent.
    #[arg(long)]
    text: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    path: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a.config, &a.out_dir),
        Command::TrainTeacher(a) => commands::train_teacher(&a.run, a.init.as_deref()),
        Command::Align(a) => commands::align(&a.run, &a.teacher),
        Command::Distill(a) => commands::distill(&a.run, &a.teacher, &a.student),
        Command::Sft(a) => commands::sft(&a.run, &a.student),
        Command::Eval(a) => commands::eval(&a),
        Command::Report(a) => commands::report(&a),
        Command::Inspect(a) => commands::inspect(&a.path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
