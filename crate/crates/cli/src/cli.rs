//! Argument parsing and the error document printed on failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::commands::{Command, Invocation, Source};
use crate::config::SchemaError;

#[derive(Debug, Parser)]
#[command(name = "dfr", version, about = "Last-layer retraining on group-balanced data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Write synthetic train/val/test splits.
    Generate(Common),
    /// Train the MLP extractor with plain ERM.
    TrainErm(Common),
    /// Penultimate-layer features of datasets under a trained model.
    Extract(Common),
    /// Retrain the last layer on group-balanced subsets.
    Dfr(Common),
    /// Group metrics of a model or head on a dataset.
    Evaluate(Common),
    /// Correlation, retrain-count, l1 or method-comparison suites.
    Sweep(Common),
    /// Run the acceptance suite.
    Verify(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON document for the command.
    #[arg(long, conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Rerun from a manifest written by an earlier run.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Master seed; `DFR_SEED` takes precedence.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "dfr-out")]
    pub output_dir: PathBuf,
}

impl Cli {
    pub fn invocation(self) -> Invocation {
        let (command, common) = match self.command {
            Sub::Generate(c) => (Command::Generate, c),
            Sub::TrainErm(c) => (Command::TrainErm, c),
            Sub::Extract(c) => (Command::Extract, c),
            Sub::Dfr(c) => (Command::Dfr, c),
            Sub::Evaluate(c) => (Command::Evaluate, c),
            Sub::Sweep(c) => (Command::Sweep, c),
            Sub::Verify(c) => (Command::Verify, c),
        };
        let source = match (common.config, common.manifest) {
            (Some(path), _) => Source::Config(path),
            (None, Some(path)) => Source::Manifest(path),
            (None, None) => Source::Default,
        };
        Invocation {
            command,
            source,
            seed: common.seed,
            output_dir: common.output_dir,
        }
    }
}

/// Machine-readable failure, printed to stderr as one JSON line.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub kind: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub causes: Vec<String>,
}

impl ErrorReport {
    pub fn from_error(err: &anyhow::Error) -> Self {
        let schema = err.chain().find_map(|e| e.downcast_ref::<SchemaError>());
        let missing = err
            .chain()
            .filter_map(|e| e.downcast_ref::<std::io::Error>())
            .any(|e| e.kind() == std::io::ErrorKind::NotFound);
        let kind = if schema.is_some() {
            "schema"
        } else if missing {
            "missing_file"
        } else if err.chain().any(|e| e.downcast_ref::<dfr_core::DfrError>().is_some()) {
            "computation"
        } else {
            "failure"
        };
        Self {
            kind,
            message: err.to_string(),
            path: schema.map(|s| s.path.clone()),
            causes: err.chain().skip(1).map(|e| e.to_string()).collect(),
        }
    }

    pub fn verification_failed() -> Self {
        Self {
            kind: "verification_failed",
            message: "one or more hard acceptance checks failed".into(),
            path: None,
            causes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

/// Exit status for a failure of this kind.
pub fn exit_code(report: &ErrorReport) -> i32 {
    match report.kind {
        "schema" => 2,
        "missing_file" => 3,
        "verification_failed" => 4,
        _ => 1,
    }
}
