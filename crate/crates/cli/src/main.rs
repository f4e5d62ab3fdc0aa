//! `e2el` command-line tool: build the candidate index, train, annotate,
//! tune the threshold and evaluate.
//!
//! Exit status is 0 on success, 1 for invalid input or configuration and 2
//! for failures while running.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use e2el_core::eval::{MatchMode, Task};

#[derive(Parser, Debug)]
#[command(name = "e2el", version, about = "End-to-end entity linking")]
struct Cli {
    /// JSON run configuration with flat dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Builds the binary candidate index from surface/entity count files.
    BuildCandidates {
        /// Output path; defaults to `paths.candidate_index`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Gold-annotated documents to report candidate recall on.
        #[arg(long)]
        recall: Option<PathBuf>,
    },
    /// Trains a model and writes the checkpoint.
    Train,
    /// Links mentions in a JSON-lines corpus.
    Annotate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the threshold stored in the checkpoint.
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
        /// `el` detects and links; `ed` links the gold spans of the input.
        #[arg(long, default_value = "el")]
        task: TaskArg,
    },
    /// Scores predicted annotations against a gold corpus.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "strong")]
        mode: ModeArg,
        #[arg(long, default_value = "el")]
        task: TaskArg,
        /// Human-readable table instead of JSON.
        #[arg(long)]
        table: bool,
    },
    /// Tunes the decoding threshold on a dev corpus.
    SelectThreshold {
        /// Defaults to `paths.dev`.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Stores the chosen threshold in the checkpoint.
        #[arg(long)]
        write: bool,
    },
    /// Compares analytic and numeric gradients of the document loss.
    GradCheck {
        /// Index of the training document to use.
        #[arg(long, default_value_t = 0)]
        doc: usize,
        /// Coordinates checked per parameter (0 checks all of them).
        #[arg(long, default_value_t = 16)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Converts CoNLL/AIDA token-per-line data to JSON lines.
    ImportConll {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains entity vectors from entity/word co-occurrence counts.
    TrainEntities {
        /// `entity<TAB>word<TAB>count` file.
        #[arg(long)]
        cooccurrence: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum ModeArg {
    Strong,
    Weak,
}

impl From<ModeArg> for MatchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Strong => MatchMode::Strong,
            ModeArg::Weak => MatchMode::Weak,
        }
    }
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum TaskArg {
    El,
    Ed,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::El => Task::El,
            TaskArg::Ed => Task::Ed,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("E2EL_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
