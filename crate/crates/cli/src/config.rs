//! The run document: one JSON file with a section per subcommand. Flags
//! override fields; the merged result is written next to the outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mpmdse::llm4dse::{HttpChatConfig, PromptMode};
use mpmdse::mpm::Variant;
use mpmdse::pareto::ObjectiveMode;
use mpmdse::textembed::{
    EmbeddingCache, HashedFeaturizer, PrecomputedEmbeddings, TextEmbedder, DEFAULT_TEXT_DIM,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder: Option<EmbedderSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_data: Option<GenDataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explore: Option<ExploreSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adrs: Option<AdrsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ReportConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        mpmdse::doc::read(path).with_context(|| format!("loading run config {}", path.display()))
    }

    /// Keeps the globals and the one section a subcommand used.
    pub fn resolved(&self) -> Self {
        Self {
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            embedder: self.embedder.clone(),
            ..Self::default()
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        match &self.out_dir {
            Some(p) => Ok(p),
            None => bail!("no output directory: pass --out or set `out_dir` in the config"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbedderSpec {
    /// Seeded feature hashing of the merged source text.
    Hashed {
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Vectors computed offline, looked up by content hash.
    Precomputed { dir: PathBuf, dim: usize },
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Hashed {
            dim: DEFAULT_TEXT_DIM,
            seed: 0,
        }
    }
}

impl EmbedderSpec {
    pub fn dim(&self) -> usize {
        match self {
            EmbedderSpec::Hashed { dim, .. } | EmbedderSpec::Precomputed { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> Result<Box<dyn TextEmbedder>> {
        Ok(match self {
            EmbedderSpec::Hashed { dim, seed } => Box::new(HashedFeaturizer::new(*dim, *seed)?),
            EmbedderSpec::Precomputed { dir, dim } => Box::new(PrecomputedEmbeddings {
                cache: EmbeddingCache::load_dir(dir)
                    .with_context(|| format!("loading embeddings from {}", dir.display()))?,
                dim: *dim,
                name: dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            }),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    /// Kernel documents; several are merged under one normaliser.
    #[serde(default)]
    pub kernels: Vec<PathBuf>,
    /// Configurations per kernel.
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_samples() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
}

fn default_hidden() -> usize {
    128
}

fn default_layers() -> usize {
    4
}

fn default_heads() -> usize {
    4
}

fn default_head_hidden() -> usize {
    64
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            hidden: default_hidden(),
            layers: default_layers(),
            heads: default_heads(),
            head_hidden: default_head_hidden(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Stop once the validation aggregate RMSE drops below this.
    #[serde(default)]
    pub target_rmse: Option<f64>,
}

fn default_epochs() -> usize {
    500
}

fn default_batch() -> usize {
    64
}

fn default_lr() -> f64 {
    1e-3
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            dataset: None,
            model: ModelSection::default(),
            epochs: default_epochs(),
            batch: default_batch(),
            lr: default_lr(),
            target_rmse: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    #[default]
    Test,
    Val,
    Train,
    All,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Output directory of a `train` run.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub split: SplitName,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    Llm,
    Random,
    Sa,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Objectives {
    /// Latency and the largest utilisation.
    #[default]
    LatencyMaxUtil,
    /// Latency and every utilisation.
    Full,
}

impl From<Objectives> for ObjectiveMode {
    fn from(o: Objectives) -> Self {
        match o {
            Objectives::LatencyMaxUtil => ObjectiveMode::LatencyMaxUtil,
            Objectives::Full => ObjectiveMode::Full,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EvaluatorSpec {
    #[default]
    Oracle,
    /// Predictions of a trained model (output directory of `train`).
    Mpm { model: PathBuf },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendSpec {
    HttpChat(HttpChatConfig),
    Replay {
        transcript: PathBuf,
    },
    #[default]
    MutationMock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreSection {
    #[serde(default)]
    pub kernel: Option<PathBuf>,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub evaluator: EvaluatorSpec,
    #[serde(default)]
    pub backend: BackendSpec,
    /// Where to write the transcript of the backend exchanges.
    #[serde(default)]
    pub record: Option<PathBuf>,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_round")]
    pub batch: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub mode: PromptMode,
    #[serde(default)]
    pub objectives: Objectives,
    /// Track ADRS against the exhaustive front when the space allows it.
    #[serde(default = "default_true")]
    pub reference: bool,
}

fn default_budget() -> usize {
    100
}

fn default_round() -> usize {
    5
}

fn default_k() -> usize {
    8
}

fn default_true() -> bool {
    true
}

impl Default for ExploreSection {
    fn default() -> Self {
        Self {
            kernel: None,
            strategy: Strategy::Llm,
            evaluator: EvaluatorSpec::Oracle,
            backend: BackendSpec::MutationMock,
            record: None,
            budget: default_budget(),
            batch: default_round(),
            k: default_k(),
            mode: PromptMode::Peodse,
            objectives: Objectives::LatencyMaxUtil,
            reference: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdrsConfig {
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub approx: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    #[serde(default)]
    pub run: Option<PathBuf>,
}

/// Unwraps a field that the config or a flag must provide.
pub fn required<'a, T>(v: &'a Option<T>, what: &str, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .with_context(|| format!("missing {what}: pass {flag} or set it in the config"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = mpmdse::doc::from_str::<RunConfig>(r#"{"seed": 1, "sede": 2}"#, "t").unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
        let err =
            mpmdse::doc::from_str::<RunConfig>(r#"{"train": {"epoch": 3}}"#, "t").unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
    }

    #[test]
    fn backend_kinds_parse() {
        let c: RunConfig = mpmdse::doc::from_str(
            r#"{"explore": {"backend": {"kind": "replay", "transcript": "t.json"}, "budget": 20}}"#,
            "t",
        )
        .unwrap();
        let e = c.explore.unwrap();
        assert_eq!(
            e.backend,
            BackendSpec::Replay {
                transcript: "t.json".into()
            }
        );
        assert_eq!(e.batch, 5);
        let c: RunConfig = mpmdse::doc::from_str(
            r#"{"explore": {"backend": {"kind": "http-chat", "endpoint": "http://x", "model": "m", "key_env": "K"}}}"#,
            "t",
        )
        .unwrap();
        assert!(matches!(
            c.explore.unwrap().backend,
            BackendSpec::HttpChat(_)
        ));
    }

    #[test]
    fn empty_document_takes_defaults() {
        let c: RunConfig = mpmdse::doc::from_str("{}", "t").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(EmbedderSpec::default().dim(), DEFAULT_TEXT_DIM);
    }
}
