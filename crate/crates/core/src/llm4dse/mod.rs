//! Design space exploration with a language model as the optimizer.
//!
//! Each round renders a prompt from the current archive, asks the backend
//! for a batch of configurations, evaluates the valid ones and folds the
//! feasible results into the Pareto archive. A round that yields nothing
//! usable is filled with uniform random configurations instead.

mod backend;
mod baseline;
mod parse;
mod prompt;

pub use backend::{
    prompt_hash, BackendError, HttpChatBackend, HttpChatConfig, LlmBackend, MutationMock,
    Recording, ReplayBackend, Transcript, TranscriptEntry,
};
pub use baseline::{random_baseline, sa_baseline, sa_score, SaConfig};
pub use parse::{fenced_blocks, parse_solutions, Diagnostic, ParseOutcome};
pub use prompt::{
    build_prompt, example_configs, ranked_examples, requested_batch, PeodsePrompt, PromptMode,
    PromptOptions, HEADER_EXAMPLES, HEADER_EXEMPLARS, HEADER_INSTRUCTION, HEADER_TASK, NO_EXAMPLES,
    PIPELINE_RULE,
};

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdfg::{build_cdfg, insert_pragma_nodes, KernelGraph};
use crate::dataset::TargetNormalizer;
use crate::designspace::{merge, DesignConfiguration, DesignSpace, SpaceError};
use crate::ecognn::GraphBatch;
use crate::mpm::{Mpm, MpmError, PreparedSample};
use crate::oracle::{KernelSpec, Oracle, QorMetrics, Resources};
use crate::pareto::{adrs, ObjectiveMode, ParetoArchive, ParetoError};
use crate::tensor::Tensor;
use crate::textembed::TextEmbedder;

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("invalid exploration settings: {0}")]
    Config(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("backend failed after {} evaluations: {source}", partial.evaluated.len())]
    Backend {
        #[source]
        source: BackendError,
        partial: Box<ExplorationState>,
    },
    #[error("evaluator: {0}")]
    Evaluator(String),
    #[error(transparent)]
    Pareto(#[from] ParetoError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl From<MpmError> for ExploreError {
    fn from(e: MpmError) -> Self {
        ExploreError::Evaluator(e.to_string())
    }
}

/// Supplies QoR metrics for configurations.
pub trait Evaluator {
    fn capacities(&self) -> Resources;
    fn evaluate(
        &mut self,
        configs: &[DesignConfiguration],
    ) -> Result<Vec<QorMetrics>, ExploreError>;
}

pub struct OracleEvaluator<'a> {
    pub oracle: &'a Oracle,
}

impl Evaluator for OracleEvaluator<'_> {
    fn capacities(&self) -> Resources {
        self.oracle.model().capacities
    }

    fn evaluate(
        &mut self,
        configs: &[DesignConfiguration],
    ) -> Result<Vec<QorMetrics>, ExploreError> {
        configs
            .iter()
            .map(|c| {
                self.oracle
                    .evaluate(c)
                    .map_err(|e| ExploreError::Evaluator(e.to_string()))
            })
            .collect()
    }
}

/// Predicts QoR with a trained model from the rendered graph and source
/// text of each configuration.
pub struct MpmEvaluator<'a> {
    pub model: &'a Mpm,
    pub spec: &'a KernelSpec,
    pub graph: KernelGraph,
    pub embedder: &'a dyn TextEmbedder,
    pub normalizer: TargetNormalizer,
}

impl<'a> MpmEvaluator<'a> {
    pub fn new(
        model: &'a Mpm,
        spec: &'a KernelSpec,
        embedder: &'a dyn TextEmbedder,
        normalizer: TargetNormalizer,
    ) -> Result<Self, ExploreError> {
        let graph =
            build_cdfg(&spec.description).map_err(|e| ExploreError::Evaluator(e.to_string()))?;
        Ok(Self {
            model,
            spec,
            graph,
            embedder,
            normalizer,
        })
    }

    fn prepare(&self, cfg: &DesignConfiguration) -> Result<PreparedSample, ExploreError> {
        let err = |e: &dyn std::fmt::Display| ExploreError::Evaluator(e.to_string());
        let text = merge(cfg, &self.spec.space, &self.spec.behavioral()).map_err(|e| err(&e))?;
        let emb = self.embedder.embed(&text).map_err(|e| err(&e))?;
        let g = insert_pragma_nodes(&self.graph, &self.spec.space, cfg).map_err(|e| err(&e))?;
        Ok(PreparedSample {
            graph: GraphBatch::from_graphs(&[&g], &self.model.config.feature_scale)
                .map_err(|e| err(&e))?,
            text: Tensor::row(&emb.vector),
            targets: [0.0; 5],
        })
    }
}

impl Evaluator for MpmEvaluator<'_> {
    fn capacities(&self) -> Resources {
        self.normalizer.capacities
    }

    fn evaluate(
        &mut self,
        configs: &[DesignConfiguration],
    ) -> Result<Vec<QorMetrics>, ExploreError> {
        let prepared = configs
            .iter()
            .map(|c| self.prepare(c))
            .collect::<Result<Vec<_>, _>>()?;
        let caps = self.normalizer.capacities.as_array();
        Ok(self
            .model
            .predict(&prepared, &self.normalizer)?
            .into_iter()
            .map(|p| {
                let d = p.denormalized;
                QorMetrics {
                    latency_cycles: d[0].max(1),
                    lut: d[1],
                    dsp: d[2],
                    ff: d[3],
                    bram: d[4],
                    feasible: d[1..].iter().zip(caps).all(|(&v, c)| v <= c),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub evaluations: usize,
    pub archive_size: usize,
    /// Against the reference front, when one was supplied and the archive
    /// is non-empty.
    pub adrs: Option<f64>,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationState {
    pub objective: ObjectiveMode,
    pub capacities: Resources,
    pub budget: usize,
    pub seed: u64,
    pub iteration: usize,
    /// Every evaluated configuration with its metrics.
    pub evaluated: BTreeMap<DesignConfiguration, QorMetrics>,
    /// Evaluation order.
    pub order: Vec<DesignConfiguration>,
    pub archive: ParetoArchive,
    pub history: Vec<HistoryRecord>,
}

impl ExplorationState {
    pub fn new(objective: ObjectiveMode, capacities: Resources, budget: usize, seed: u64) -> Self {
        Self {
            objective,
            capacities,
            budget,
            seed,
            iteration: 0,
            evaluated: BTreeMap::new(),
            order: Vec::new(),
            archive: ParetoArchive::new(),
            history: Vec::new(),
        }
    }

    /// Stores one result; feasible points are offered to the archive.
    pub fn record(&mut self, cfg: DesignConfiguration, m: QorMetrics) {
        if self.evaluated.insert(cfg.clone(), m).is_some() {
            return;
        }
        self.order.push(cfg.clone());
        if m.feasible {
            let obj = self.objective.objectives(&m, &self.capacities);
            self.archive.insert(cfg, obj);
        }
    }

    pub fn remaining(&self) -> usize {
        self.budget.saturating_sub(self.evaluated.len())
    }

    fn push_history(
        &mut self,
        reference: Option<&[Vec<f64>]>,
        fallback: bool,
    ) -> Result<(), ExploreError> {
        let adrs = match reference {
            Some(r) if !self.archive.is_empty() => Some(adrs(r, &self.archive.objectives())?.adrs),
            _ => None,
        };
        self.history.push(HistoryRecord {
            iteration: self.iteration,
            evaluations: self.evaluated.len(),
            archive_size: self.archive.len(),
            adrs,
            fallback,
        });
        Ok(())
    }

    /// `config_hash`, pragma values, metrics and feasibility per evaluation.
    pub fn write_evaluated_csv(
        &self,
        path: &Path,
        space: &DesignSpace,
    ) -> Result<(), ExploreError> {
        let err = |e: csv::Error| ExploreError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut header = vec!["config_hash".to_string()];
        header.extend(space.directives.iter().map(|d| d.name.clone()));
        header.extend(["latency", "lut", "dsp", "ff", "bram", "feasible"].map(String::from));
        w.write_record(&header).map_err(err)?;
        for cfg in &self.order {
            let m = &self.evaluated[cfg];
            let mut row = vec![space.config_hash(cfg)];
            row.extend(space.values(cfg).map(|(_, v)| v.to_string()));
            row.extend([m.latency_cycles, m.lut, m.dsp, m.ff, m.bram].map(|v| v.to_string()));
            row.push(m.feasible.to_string());
            w.write_record(&row).map_err(err)?;
        }
        w.flush().map_err(|e| ExploreError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreConfig {
    /// Maximum number of evaluated configurations.
    pub budget: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: PromptMode,
}

fn default_batch() -> usize {
    5
}

fn default_k() -> usize {
    8
}

impl ExploreConfig {
    pub fn new(budget: usize, seed: u64) -> Self {
        Self {
            budget,
            batch: default_batch(),
            k: default_k(),
            seed,
            mode: PromptMode::Peodse,
        }
    }
}

/// Up to `n` distinct configurations not rejected by `taken`, drawn
/// uniformly. Falls back to a scan when rejection sampling stalls.
pub(crate) fn fresh_random<R: Rng>(
    space: &DesignSpace,
    rng: &mut R,
    taken: impl Fn(&DesignConfiguration) -> bool,
    n: usize,
) -> Vec<DesignConfiguration> {
    let mut out: Vec<DesignConfiguration> = Vec::with_capacity(n);
    for _ in 0..64 * n {
        if out.len() == n {
            return out;
        }
        let c = space.random_config(rng);
        if !taken(&c) && !out.contains(&c) {
            out.push(c);
        }
    }
    let size = space.size();
    let start = rng.gen_range(0..size);
    for i in 0..size {
        if out.len() == n {
            break;
        }
        let c = space.config_at((start + i) % size);
        if !taken(&c) && !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// Runs the prompt, parse, evaluate, archive loop until the budget is
/// spent or the space is exhausted.
pub fn run_llm4dse(
    kernel: &str,
    space: &DesignSpace,
    evaluator: &mut dyn Evaluator,
    backend: &mut dyn LlmBackend,
    cfg: &ExploreConfig,
    objective: ObjectiveMode,
    reference: Option<&[Vec<f64>]>,
) -> Result<ExplorationState, ExploreError> {
    if cfg.batch == 0 || cfg.budget < cfg.batch {
        return Err(ExploreError::Config(format!(
            "budget {} must be at least the batch size {} (and the batch positive)",
            cfg.budget, cfg.batch
        )));
    }
    space.validate()?;
    let mut state = ExplorationState::new(objective, evaluator.capacities(), cfg.budget, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = space.size();
    while state.remaining() > 0 && (state.evaluated.len() as u128) < size {
        let batch = cfg.batch.min(state.remaining());
        let opts = PromptOptions {
            kernel: kernel.to_string(),
            k: cfg.k,
            batch,
            mode: cfg.mode,
            objective,
        };
        let text = build_prompt(&state, space, &opts)?.render();
        let response = match backend.complete(&text) {
            Ok(r) => r,
            Err(source) => {
                return Err(ExploreError::Backend {
                    source,
                    partial: Box::new(state),
                })
            }
        };
        let parsed = parse_solutions(&response, space, |c| state.evaluated.contains_key(c), batch);
        for d in &parsed.diagnostics {
            log::debug!("round {}: {d}", state.iteration);
        }
        let (configs, fallback) = if parsed.configs.is_empty() {
            log::warn!(
                "round {}: no usable configuration in the response; sampling {batch} at random",
                state.iteration
            );
            (
                fresh_random(space, &mut rng, |c| state.evaluated.contains_key(c), batch),
                true,
            )
        } else {
            (parsed.configs, false)
        };
        let metrics = evaluator.evaluate(&configs)?;
        for (c, m) in configs.into_iter().zip(metrics) {
            state.record(c, m);
        }
        state.iteration += 1;
        state.push_history(reference, fallback)?;
    }
    Ok(state)
}

/// Columns `evaluations,adrs`, one row per history record that has an
/// ADRS value.
pub fn emit_convergence(history: &[HistoryRecord], path: &Path) -> Result<(), ExploreError> {
    let err = |e: csv::Error| ExploreError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["evaluations", "adrs"]).map_err(err)?;
    for h in history {
        if let Some(a) = h.adrs {
            w.write_record([h.evaluations.to_string(), format!("{a:.12}")])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| ExploreError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::tests::{toy_model, toy_space};
    use crate::pareto::{dominates, reference_front, DEFAULT_EXHAUSTIVE_LIMIT};

    fn oracle() -> Oracle {
        Oracle::new(toy_model(), toy_space()).unwrap()
    }

    fn brute_front(state: &ExplorationState) -> Vec<(DesignConfiguration, Vec<f64>)> {
        let pts: Vec<_> = state
            .evaluated
            .iter()
            .filter(|(_, m)| m.feasible)
            .map(|(c, m)| (c.clone(), state.objective.objectives(m, &state.capacities)))
            .collect();
        let mut front: Vec<_> = pts
            .iter()
            .filter(|(_, o)| !pts.iter().any(|(_, p)| dominates(p, o).unwrap()))
            .cloned()
            .collect();
        front.sort_by(|a, b| a.0.cmp(&b.0));
        front
    }

    fn archive_set(state: &ExplorationState) -> Vec<(DesignConfiguration, Vec<f64>)> {
        let mut v: Vec<_> = state
            .archive
            .entries()
            .iter()
            .map(|e| (e.config.clone(), e.objectives.clone()))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    #[test]
    fn mock_run_respects_budget_and_archive_contract() {
        let o = oracle();
        let space = toy_space();
        let reference =
            reference_front(&o, ObjectiveMode::LatencyMaxUtil, DEFAULT_EXHAUSTIVE_LIMIT).unwrap();
        let mut backend = MutationMock::new(space.clone(), 4);
        let state = run_llm4dse(
            "toy",
            &space,
            &mut OracleEvaluator { oracle: &o },
            &mut backend,
            &ExploreConfig::new(40, 4),
            ObjectiveMode::LatencyMaxUtil,
            Some(&reference.objectives()),
        )
        .unwrap();
        assert_eq!(state.evaluated.len(), 40);
        assert_eq!(archive_set(&state), brute_front(&state));
        for c in state.evaluated.keys() {
            space.check(c).unwrap();
        }
        let adrs: Vec<f64> = state.history.iter().filter_map(|h| h.adrs).collect();
        assert!(adrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(state.history.len() >= 8);
        assert_eq!(state.history.last().unwrap().evaluations, 40);
    }

    #[test]
    fn replayed_run_is_identical() {
        let o = oracle();
        let space = toy_space();
        let cfg = ExploreConfig::new(25, 9);
        let mut rec = Recording::new(MutationMock::new(space.clone(), 9));
        let live = run_llm4dse(
            "toy",
            &space,
            &mut OracleEvaluator { oracle: &o },
            &mut rec,
            &cfg,
            ObjectiveMode::LatencyMaxUtil,
            None,
        )
        .unwrap();
        let mut replay = ReplayBackend::new(rec.transcript.clone());
        let again = run_llm4dse(
            "toy",
            &space,
            &mut OracleEvaluator { oracle: &o },
            &mut replay,
            &cfg,
            ObjectiveMode::LatencyMaxUtil,
            None,
        )
        .unwrap();
        assert_eq!(live, again);
    }

    struct Silent;

    impl LlmBackend for Silent {
        fn id(&self) -> String {
            "silent".into()
        }
        fn complete(&mut self, _: &str) -> Result<String, BackendError> {
            Ok("I cannot help with that.".into())
        }
    }

    #[test]
    fn unusable_rounds_fall_back_to_random() {
        let o = oracle();
        let space = toy_space();
        let state = run_llm4dse(
            "toy",
            &space,
            &mut OracleEvaluator { oracle: &o },
            &mut Silent,
            &ExploreConfig::new(12, 1),
            ObjectiveMode::LatencyMaxUtil,
            None,
        )
        .unwrap();
        assert_eq!(state.evaluated.len(), 12);
        assert!(state.history.iter().all(|h| h.fallback));
    }

    struct Failing;

    impl LlmBackend for Failing {
        fn id(&self) -> String {
            "failing".into()
        }
        fn complete(&mut self, _: &str) -> Result<String, BackendError> {
            Err(BackendError::Exhausted {
                attempts: 4,
                last: "down".into(),
            })
        }
    }

    #[test]
    fn backend_failure_keeps_partial_state() {
        let o = oracle();
        let err = run_llm4dse(
            "toy",
            &toy_space(),
            &mut OracleEvaluator { oracle: &o },
            &mut Failing,
            &ExploreConfig::new(10, 1),
            ObjectiveMode::LatencyMaxUtil,
            None,
        )
        .unwrap_err();
        match err {
            ExploreError::Backend { partial, .. } => assert!(partial.evaluated.is_empty()),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn budget_below_batch_is_rejected() {
        let o = oracle();
        let err = run_llm4dse(
            "toy",
            &toy_space(),
            &mut OracleEvaluator { oracle: &o },
            &mut Silent,
            &ExploreConfig::new(3, 1),
            ObjectiveMode::LatencyMaxUtil,
            None,
        );
        assert!(matches!(err, Err(ExploreError::Config(_))));
    }

    #[test]
    fn convergence_csv_has_header_and_one_row_per_round() {
        let hist: Vec<HistoryRecord> = (0..3)
            .map(|i| HistoryRecord {
                iteration: i + 1,
                evaluations: 5 * (i + 1),
                archive_size: 1,
                adrs: Some(0.5 / (i + 1) as f64),
                fallback: false,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        emit_convergence(&hist, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "evaluations,adrs");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "5,0.500000000000");
    }

    #[test]
    fn prompt_sections_and_empty_examples() {
        let state =
            ExplorationState::new(ObjectiveMode::LatencyMaxUtil, toy_model().capacities, 10, 0);
        let opts = PromptOptions {
            kernel: "toy".into(),
            k: 8,
            batch: 5,
            mode: PromptMode::Peodse,
            objective: ObjectiveMode::LatencyMaxUtil,
        };
        let p = build_prompt(&state, &toy_space(), &opts).unwrap();
        let text = p.render();
        for h in [
            HEADER_TASK,
            HEADER_EXAMPLES,
            HEADER_INSTRUCTION,
            HEADER_EXEMPLARS,
        ] {
            assert_eq!(text.matches(h).count(), 1, "{h}");
        }
        assert_eq!(p.examples, NO_EXAMPLES);
        assert!(p.task_instruction.contains(PIPELINE_RULE));
        assert_eq!(requested_batch(&text), Some(5));
        for (mode, present) in [
            (PromptMode::ZeroShot, [false, false, false]),
            (PromptMode::FewShot, [true, false, false]),
            (PromptMode::InstructionOnly, [false, true, false]),
        ] {
            let t = build_prompt(
                &state,
                &toy_space(),
                &PromptOptions {
                    mode,
                    ..opts.clone()
                },
            )
            .unwrap()
            .render();
            let got =
                [HEADER_EXAMPLES, HEADER_INSTRUCTION, HEADER_EXEMPLARS].map(|h| t.contains(h));
            assert_eq!(got, present, "{mode:?}");
            assert!(t.contains(HEADER_TASK));
        }
    }

    #[test]
    fn examples_round_trip_through_prompt_text() {
        let o = oracle();
        let space = toy_space();
        let mut state =
            ExplorationState::new(ObjectiveMode::LatencyMaxUtil, toy_model().capacities, 50, 0);
        for c in space.sample_random(2, 20) {
            let m = o.evaluate(&c).unwrap();
            state.record(c, m);
        }
        let opts = PromptOptions {
            kernel: "toy".into(),
            k: 3,
            batch: 5,
            mode: PromptMode::Peodse,
            objective: ObjectiveMode::LatencyMaxUtil,
        };
        let text = build_prompt(&state, &space, &opts).unwrap().render();
        let want: Vec<DesignConfiguration> = ranked_examples(state.archive.entries(), 3)
            .into_iter()
            .map(|e| e.config.clone())
            .collect();
        assert_eq!(example_configs(&text, &space), want);
        assert!(!want.is_empty());
    }
}
