mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mpmdse::llm4dse::{BackendError, ExploreError, PromptMode};
use mpmdse::mpm::{MpmError, Variant};
use serde::de::DeserializeOwned;

use crate::commands::EmptyArchive;
use crate::config::{Objectives, SplitName, Strategy};

/// Multimodal QoR prediction and LLM-guided design-space exploration for HLS
/// kernels, driven by a synthetic QoR oracle.
#[derive(Debug, Parser)]
#[command(name = "mpmdse", version)]
pub struct Cli {
    /// Run document; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample configurations and write a graph/text dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Per-target RMSE and MAPE of a trained model.
    Eval(EvalArgs),
    /// Search a design space for its Pareto front.
    Explore(ExploreArgs),
    /// ADRS between two front files.
    Adrs(AdrsArgs),
    /// Summarise the outputs found under a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Kernel document; repeat to merge kernels into one dataset.
    #[arg(long = "kernel")]
    pub kernels: Vec<PathBuf>,
    /// Configurations per kernel.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Width of the hashed text features.
    #[arg(long)]
    pub text_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// full, graph-only or text-only.
    #[arg(long, value_parser = serde_enum::<Variant>)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub target_rmse: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory of a `train` run.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitName>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Mock,
    Replay,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvaluatorKind {
    Oracle,
    Mpm,
}

#[derive(Debug, Args)]
pub struct ExploreArgs {
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub strategy: Option<Strategy>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Transcript to replay with `--backend replay`.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Write the backend exchanges to this file.
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<usize>,
    /// Configurations requested per round.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Archive examples shown in each prompt.
    #[arg(long)]
    pub k: Option<usize>,
    /// peodse, zero-shot, few-shot or instruction-only.
    #[arg(long, value_parser = serde_enum::<PromptMode>)]
    pub mode: Option<PromptMode>,
    #[arg(long, value_enum)]
    pub objectives: Option<Objectives>,
    #[arg(long, value_enum)]
    pub evaluator: Option<EvaluatorKind>,
    /// Output directory of a `train` run, for `--evaluator mpm`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Skip the exhaustive reference front.
    #[arg(long)]
    pub no_reference: bool,
}

#[derive(Debug, Args)]
pub struct AdrsArgs {
    /// Reference front CSV (first column is an identifier).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Approximate front CSV.
    #[arg(long)]
    pub approx: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: Option<PathBuf>,
}

/// Parses a kebab- or snake-case name through the type's serde names.
fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    let parse = |v: String| serde_json::from_value::<T>(serde_json::Value::String(v));
    parse(s.to_string())
        .or_else(|_| parse(s.replace('-', "_")))
        .or_else(|_| parse(s.replace('_', "-")))
        .map_err(|e| e.to_string())
}

/// 3 for backend failures, 4 when no valid design was found, 1 for
/// failures while computing, 2 for everything caught while validating.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<EmptyArchive>() {
            return 4;
        }
        if cause.is::<BackendError>() {
            return 3;
        }
        match cause.downcast_ref::<ExploreError>() {
            Some(ExploreError::Backend { .. }) => return 3,
            Some(ExploreError::Evaluator(_) | ExploreError::Io { .. }) => return 1,
            _ => {}
        }
        if let Some(MpmError::Diverged { .. } | MpmError::Io { .. } | MpmError::Tensor(_)) =
            cause.downcast_ref()
        {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enum_flags_accept_both_spellings() {
        assert_eq!(
            serde_enum::<Variant>("graph-only").unwrap(),
            Variant::GraphOnly
        );
        assert_eq!(
            serde_enum::<Variant>("text_only").unwrap(),
            Variant::TextOnly
        );
        assert_eq!(
            serde_enum::<PromptMode>("zero-shot").unwrap(),
            PromptMode::ZeroShot
        );
        assert!(serde_enum::<PromptMode>("many-shot").is_err());
    }

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let e = anyhow::Error::new(EmptyArchive(20)).context("exploring");
        assert_eq!(exit_code(&e), 4);
        let e = anyhow::Error::new(ExploreError::Config("budget".into()));
        assert_eq!(exit_code(&e), 2);
        let e = anyhow::Error::new(MpmError::Diverged {
            epoch: 3,
            loss: f64::NAN,
        });
        assert_eq!(exit_code(&e), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("missing file")), 2);
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
