//! Command-line front end and HTTP review service.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod server;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cbdt", version, about = "Bias corpus builder, detector and review service")]
pub struct Cli {
    /// key=value file with flag defaults (default: $CBDT_HOME/cbdt.conf).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Flag and label sentences from a text file and write the corpus.
    BuildCorpus(BuildCorpusArgs),
    /// Train a detector and write a checkpoint plus a training log.
    Train(TrainArgs),
    /// Score a checkpoint against labelled records.
    Evaluate(EvaluateArgs),
    /// Run the detector on one sentence.
    Detect(DetectArgs),
    /// Serve the annotation review API over a corpus directory.
    ServeReview(ServeArgs),
    /// Estimate training energy and emissions.
    Carbon(CarbonArgs),
}

#[derive(Debug, Args)]
pub struct BuildCorpusArgs {
    /// One sentence per line, or with --reviewed a JSONL file of reviewed records.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory (default: $CBDT_HOME/corpus).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Treat the input as reviewed JSONL records and finalize them.
    #[arg(long)]
    pub reviewed: bool,
    /// Lexicon TSV (term, dimension); the bundled lexicon by default.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Rule TSV (id, dimension, example, rationale); bundled rules by default.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Accept lexicon-backed flags without review.
    #[arg(long)]
    pub auto_finalize: bool,
    /// Source name recorded in provenance ids (default: input file name).
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long)]
    pub train_ratio: Option<f64>,
    #[arg(long)]
    pub dev_ratio: Option<f64>,
    #[arg(long)]
    pub test_ratio: Option<f64>,
    #[arg(long)]
    pub identifier: Option<String>,
    #[arg(long = "dataset-version")]
    pub dataset_version: Option<String>,
    #[arg(long)]
    pub license: Option<String>,
    /// ISO date (default: today).
    #[arg(long)]
    pub creation_date: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory or JSONL file.
    #[arg(long, required_unless_present = "synthetic")]
    pub data: Option<PathBuf>,
    /// Train on the built-in 32-sentence synthetic corpus.
    #[arg(long, conflicts_with = "data")]
    pub synthetic: bool,
    /// Split to train on when the corpus has a manifest (train, dev, test, all).
    #[arg(long)]
    pub split: Option<String>,
    /// Checkpoint path (default: $CBDT_HOME/model.ckpt).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log path (default: checkpoint path with .log.tsv appended).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub activation: Option<String>,
    /// Gate and label threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Weight of the entity loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// full, layer-wise or feature-extraction.
    #[arg(long)]
    pub fine_tune: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Suppress per-epoch lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Corpus directory or JSONL file.
    #[arg(long)]
    pub data: PathBuf,
    /// train, dev, test or all (default: test when the corpus has splits).
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Print one JSON object instead of tables.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Corpus directory written by build-corpus (default: $CBDT_HOME/corpus).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub addr: Option<String>,
    #[arg(long)]
    pub quorum: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CarbonArgs {
    #[arg(long)]
    pub watts: f64,
    /// Minutes per epoch.
    #[arg(long)]
    pub minutes: f64,
    #[arg(long)]
    pub epochs: u32,
    /// kgCO2e per kWh.
    #[arg(long)]
    pub intensity: f64,
    #[arg(long)]
    pub json: bool,
}

/// A problem with the user's input rather than with the program.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

pub fn user_error(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

/// Exit code for a failed command: 1 for bad input, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use cbdt_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UserError>() {
            return EXIT_INVALID;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) | E::Json(_) | E::NonFiniteLoss { .. } => EXIT_INTERNAL,
                _ => EXIT_INVALID,
            };
        }
    }
    EXIT_INTERNAL
}

/// Parses `argv` and runs the command, writing results to `out` and
/// diagnostics to `err`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match commands::dispatch(cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}
