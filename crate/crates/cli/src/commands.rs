use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;
use mpmdse::dataset::{split_indices, Dataset, TargetNormalizer, NUM_TARGETS, TARGET_NAMES};
use mpmdse::designspace::DesignSpace;
use mpmdse::llm4dse::{
    emit_convergence, random_baseline, run_llm4dse, sa_baseline, Evaluator, ExplorationState,
    ExploreConfig, ExploreError, HttpChatBackend, LlmBackend, MpmEvaluator, MutationMock,
    OracleEvaluator, Recording, ReplayBackend, SaConfig, Transcript,
};
use mpmdse::mpm::{
    mape_table, predict_rows, rmse_table, train, write_error_table, write_metrics_csv, Mpm,
    MpmConfig, MpmError, TargetErrors, TrainConfig,
};
use mpmdse::oracle::{gen_dataset, KernelSpec, Oracle};
use mpmdse::pareto::{
    adrs, reference_front, write_front_csv, ObjectiveMode, ParetoArchive, DEFAULT_EXHAUSTIVE_LIMIT,
};
use serde::{Deserialize, Serialize};

use crate::config::{
    required, AdrsConfig, BackendSpec, EmbedderSpec, EvalConfig, EvaluatorSpec, ExploreSection,
    ReportConfig, RunConfig, SplitName, Strategy, TrainSection,
};
use crate::{
    AdrsArgs, BackendKind, Cli, Command, EvalArgs, EvaluatorKind, ExploreArgs, GenDataArgs,
    ReportArgs, TrainArgs,
};

/// The search finished without a single feasible design.
#[derive(Debug, thiserror::Error)]
#[error("no feasible configuration found in {0} evaluations")]
pub struct EmptyArchive(pub usize);

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = Some(o);
    }
    match cli.command {
        Command::GenData(a) => gen_data(cfg, a),
        Command::Train(a) => train_cmd(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Explore(a) => explore(cfg, a),
        Command::Adrs(a) => adrs_cmd(cfg, a),
        Command::Report(a) => report(cfg, a),
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_resolved(dir: &Path, resolved: &RunConfig) -> Result<()> {
    Ok(mpmdse::doc::write(
        &dir.join("resolved_config.json"),
        resolved,
    )?)
}

fn read_kernel(path: &Path) -> Result<KernelSpec> {
    KernelSpec::read(path).with_context(|| format!("loading kernel {}", path.display()))
}

fn gen_data(mut cfg: RunConfig, a: GenDataArgs) -> Result<()> {
    let mut sec = cfg.gen_data.take().unwrap_or_default();
    if !a.kernels.is_empty() {
        sec.kernels = a.kernels;
    }
    if let Some(n) = a.samples {
        sec.samples = n;
    }
    let mut embedder = cfg.embedder.take().unwrap_or_default();
    if let Some(d) = a.text_dim {
        match &mut embedder {
            EmbedderSpec::Hashed { dim, .. } | EmbedderSpec::Precomputed { dim, .. } => *dim = d,
        }
    }
    ensure!(
        !sec.kernels.is_empty(),
        "no kernels: pass --kernel or set `gen_data.kernels`"
    );
    ensure!(sec.samples > 0, "`samples` must be positive");
    let out = cfg.out_dir()?.to_path_buf();
    let provider = embedder.build()?;

    let mut parts = Vec::new();
    let mut ids = Vec::new();
    for path in &sec.kernels {
        let spec = read_kernel(path)?;
        let size = spec.space.size();
        ensure!(
            sec.samples as u128 <= size,
            "kernel `{}` has {size} configurations, fewer than the {} samples requested",
            spec.kernel_id(),
            sec.samples
        );
        parts.push(gen_dataset(
            &spec,
            sec.samples,
            cfg.seed,
            provider.as_ref(),
            None,
        )?);
        ids.push(spec.kernel_id().to_string());
    }
    let ds = Dataset::combine(parts)?;
    create_out(&out)?;
    ds.write_dir(&out, &ids.join("+"))?;
    println!(
        "wrote {} samples of {} to {}",
        ds.samples.len(),
        ids.join(", "),
        out.display()
    );

    cfg.embedder = Some(embedder);
    let mut resolved = cfg.resolved();
    resolved.gen_data = Some(sec);
    write_resolved(&out, &resolved)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitDoc {
    seed: u64,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

fn read_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::read_dir(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn train_cmd(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let mut sec: TrainSection = cfg.train.take().unwrap_or_default();
    if a.dataset.is_some() {
        sec.dataset = a.dataset;
    }
    if let Some(v) = a.epochs {
        sec.epochs = v;
    }
    if let Some(v) = a.batch {
        sec.batch = v;
    }
    if let Some(v) = a.lr {
        sec.lr = v;
    }
    if let Some(v) = a.hidden {
        sec.model.hidden = v;
    }
    if let Some(v) = a.layers {
        sec.model.layers = v;
    }
    if let Some(v) = a.variant {
        sec.model.variant = v;
    }
    if a.target_rmse.is_some() {
        sec.target_rmse = a.target_rmse;
    }
    ensure!(
        sec.epochs > 0 && sec.batch > 0,
        "`epochs` and `batch` must be positive"
    );
    ensure!(
        sec.lr > 0.0 && sec.lr.is_finite(),
        "`lr` must be a positive number"
    );
    let out = cfg.out_dir()?.to_path_buf();
    let ds = read_dataset(required(&sec.dataset, "dataset", "--dataset")?)?;
    ensure!(!ds.samples.is_empty(), "the dataset holds no samples");

    let split = split_indices(ds.samples.len(), cfg.seed)?;
    let model_cfg = MpmConfig {
        variant: sec.model.variant,
        hidden: sec.model.hidden,
        layers: sec.model.layers,
        heads: sec.model.heads,
        head_hidden: sec.model.head_hidden,
        init_seed: cfg.seed,
        ..MpmConfig::new(ds.samples[0].text_embedding.len())
    };
    let mut model = Mpm::new(model_cfg)?;
    let prepared = model.prepare_all(&ds.samples)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| prepared[i].clone()).collect::<Vec<_>>();

    create_out(&out)?;
    let checkpoint = out.join("checkpoint.bin");
    let tc = TrainConfig {
        epochs: sec.epochs,
        batch: sec.batch,
        lr: sec.lr,
        seed: cfg.seed,
        target_rmse: sec.target_rmse,
        checkpoint: Some(checkpoint.clone()),
    };
    let history = train(&mut model, &pick(&split.train), &pick(&split.val), &tc)?;
    model.save(&checkpoint)?;
    write_metrics_csv(&out.join("metrics.csv"), &history)?;
    mpmdse::doc::write(&out.join("normalizer.json"), &ds.normalizer)?;
    mpmdse::doc::write(
        &out.join("split.json"),
        &SplitDoc {
            seed: cfg.seed,
            train: split.train,
            val: split.val,
            test: split.test,
        },
    )?;
    println!(
        "trained {} epochs; best validation RMSE {:.6} at epoch {}",
        history.epochs.len(),
        history.best_val,
        history.best_epoch
    );

    let mut resolved = cfg.resolved();
    resolved.train = Some(sec);
    write_resolved(&out, &resolved)
}

/// A trained model with the normaliser of its dataset.
fn load_model(dir: &Path) -> Result<(Mpm, TargetNormalizer)> {
    let checkpoint = dir.join("checkpoint.bin");
    ensure!(
        checkpoint.is_file(),
        "{} holds no checkpoint.bin; point --model at a `train` output",
        dir.display()
    );
    let model =
        Mpm::load(&checkpoint).with_context(|| format!("loading model from {}", dir.display()))?;
    let normalizer: TargetNormalizer = mpmdse::doc::read(&dir.join("normalizer.json"))?;
    Ok((model, normalizer))
}

fn eval(mut cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let mut sec: EvalConfig = cfg.eval.take().unwrap_or_default();
    if a.dataset.is_some() {
        sec.dataset = a.dataset;
    }
    if a.model.is_some() {
        sec.model = a.model;
    }
    if let Some(s) = a.split {
        sec.split = s;
    }
    let model_dir = required(&sec.model, "model directory", "--model")?.clone();
    if sec.dataset.is_none() {
        let trained: RunConfig = mpmdse::doc::read(&model_dir.join("resolved_config.json"))?;
        sec.dataset = trained.train.and_then(|t| t.dataset);
    }
    let out = cfg
        .out_dir
        .clone()
        .unwrap_or_else(|| model_dir.join("eval"));
    let (model, normalizer) = load_model(&model_dir)?;
    let mut ds = read_dataset(required(&sec.dataset, "dataset", "--dataset")?)?;
    ds.normalizer = normalizer;
    ds.renormalize();

    let indices: Vec<usize> = match sec.split {
        SplitName::All => (0..ds.samples.len()).collect(),
        split => {
            let doc: SplitDoc = mpmdse::doc::read(&model_dir.join("split.json"))?;
            let total = doc.train.len() + doc.val.len() + doc.test.len();
            ensure!(
                total == ds.samples.len(),
                "the model was split over {total} samples but the dataset holds {}",
                ds.samples.len()
            );
            match split {
                SplitName::Train => doc.train,
                SplitName::Val => doc.val,
                _ => doc.test,
            }
        }
    };
    ensure!(!indices.is_empty(), "the selected split is empty");
    let samples: Vec<_> = indices.iter().map(|&i| ds.samples[i].clone()).collect();
    let prepared = model.prepare_all(&samples)?;
    let preds = predict_rows(&model, &prepared, 64)?;
    let targets: Vec<[f64; NUM_TARGETS]> = samples.iter().map(|s| s.targets).collect();

    let mut rows: Vec<(&str, TargetErrors)> = vec![("rmse", rmse_table(&preds, &targets)?)];
    match mape_table(&preds, &targets) {
        Ok(m) => rows.push(("mape", m)),
        Err(e @ MpmError::ZeroTarget { .. }) => log::warn!("MAPE row omitted: {e}"),
        Err(e) => return Err(e.into()),
    }
    create_out(&out)?;
    let mut table = Vec::new();
    write_error_table(&mut table, &rows)?;
    fs::write(out.join("eval.csv"), &table)?;
    print!("{}", String::from_utf8_lossy(&table));

    let mut w = csv::Writer::from_path(out.join("predictions.csv"))?;
    let mut header = vec!["kernel_id".to_string(), "config_hash".to_string()];
    for t in TARGET_NAMES {
        header.push(format!("true_{t}"));
        header.push(format!("pred_{t}"));
    }
    w.write_record(&header)?;
    for (s, p) in samples.iter().zip(&preds) {
        let truth = ds.normalizer.denormalize(&s.targets);
        let guess = ds.normalizer.denormalize(p);
        let mut row = vec![s.kernel_id.clone(), s.config_hash.clone()];
        for (t, g) in truth.iter().zip(&guess) {
            row.push(t.to_string());
            row.push(g.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut resolved = cfg.resolved();
    resolved.out_dir = Some(out.clone());
    resolved.eval = Some(sec);
    write_resolved(&out, &resolved)
}

#[derive(Debug, Serialize)]
struct ExploreSummary {
    kernel: String,
    strategy: Strategy,
    evaluator: String,
    budget: usize,
    evaluations: usize,
    rounds: usize,
    fallback_rounds: usize,
    archive_size: usize,
    reference_size: Option<usize>,
    final_adrs: Option<f64>,
    /// ADRS of the evaluated designs re-scored by the oracle, for model
    /// evaluators.
    oracle_adrs: Option<f64>,
    /// Set when the backend failed and the results are partial.
    error: Option<String>,
}

fn explore(mut cfg: RunConfig, a: ExploreArgs) -> Result<()> {
    let mut sec: ExploreSection = cfg.explore.take().unwrap_or_default();
    if a.kernel.is_some() {
        sec.kernel = a.kernel;
    }
    if let Some(s) = a.strategy {
        sec.strategy = s;
    }
    match a.backend {
        Some(BackendKind::Mock) => sec.backend = BackendSpec::MutationMock,
        Some(BackendKind::Replay) => {
            let transcript = match (a.transcript, &sec.backend) {
                (Some(t), _) => t,
                (None, BackendSpec::Replay { transcript }) => transcript.clone(),
                (None, _) => bail!("`--backend replay` needs --transcript"),
            };
            sec.backend = BackendSpec::Replay { transcript };
        }
        Some(BackendKind::Http) => ensure!(
            matches!(sec.backend, BackendSpec::HttpChat(_)),
            "`--backend http` needs an `explore.backend` section of kind `http-chat` in the config"
        ),
        None => {
            if let (Some(t), BackendSpec::Replay { transcript }) = (a.transcript, &mut sec.backend)
            {
                *transcript = t;
            }
        }
    }
    if a.record.is_some() {
        sec.record = a.record;
    }
    if let Some(v) = a.budget {
        sec.budget = v;
    }
    if let Some(v) = a.batch {
        sec.batch = v;
    }
    if let Some(v) = a.k {
        sec.k = v;
    }
    if let Some(v) = a.mode {
        sec.mode = v;
    }
    if let Some(v) = a.objectives {
        sec.objectives = v;
    }
    match a.evaluator {
        Some(EvaluatorKind::Oracle) => sec.evaluator = EvaluatorSpec::Oracle,
        Some(EvaluatorKind::Mpm) => {
            let model = match (a.model, &sec.evaluator) {
                (Some(m), _) => m,
                (None, EvaluatorSpec::Mpm { model }) => model.clone(),
                (None, _) => bail!("`--evaluator mpm` needs --model"),
            };
            sec.evaluator = EvaluatorSpec::Mpm { model };
        }
        None => {
            if let (Some(m), EvaluatorSpec::Mpm { model }) = (a.model, &mut sec.evaluator) {
                *model = m;
            }
        }
    }
    if a.no_reference {
        sec.reference = false;
    }
    ensure!(sec.budget > 0, "`budget` must be positive");
    if sec.strategy == Strategy::Llm {
        ensure!(
            sec.batch > 0 && sec.budget >= sec.batch,
            "budget {} must be at least the batch size {} (and the batch positive)",
            sec.budget,
            sec.batch
        );
    }
    let out = cfg.out_dir()?.to_path_buf();
    let spec = read_kernel(required(&sec.kernel, "kernel", "--kernel")?)?;
    let oracle = spec.oracle()?;
    let space = &spec.space;
    let objective = ObjectiveMode::from(sec.objectives);

    let reference = if sec.reference && space.size() <= DEFAULT_EXHAUSTIVE_LIMIT {
        Some(reference_front(
            &oracle,
            objective,
            DEFAULT_EXHAUSTIVE_LIMIT,
        )?)
    } else {
        if sec.reference {
            log::warn!(
                "{} configurations is too many for an exhaustive reference front",
                space.size()
            );
        }
        None
    };
    let ref_points = reference.as_ref().map(|r| r.objectives());

    // the embedder must outlive the evaluator that borrows it
    let trained;
    let provider;
    let mut evaluator: Box<dyn Evaluator + '_> = match &sec.evaluator {
        EvaluatorSpec::Oracle => Box::new(OracleEvaluator { oracle: &oracle }),
        EvaluatorSpec::Mpm { model } => {
            trained = load_model(model)?;
            let embedder = cfg.embedder.clone().unwrap_or(EmbedderSpec::Hashed {
                dim: trained.0.config.text_dim,
                seed: 0,
            });
            ensure!(
                embedder.dim() == trained.0.config.text_dim,
                "embedder width {} differs from the model's text width {}",
                embedder.dim(),
                trained.0.config.text_dim
            );
            provider = embedder.build()?;
            cfg.embedder = Some(embedder);
            Box::new(MpmEvaluator::new(
                &trained.0,
                &spec,
                provider.as_ref(),
                trained.1.clone(),
            )?)
        }
    };

    create_out(&out)?;
    let mut recording = None;
    let result = match sec.strategy {
        Strategy::Random => random_baseline(
            space,
            evaluator.as_mut(),
            sec.budget,
            cfg.seed,
            objective,
            ref_points.as_deref(),
        ),
        Strategy::Sa => sa_baseline(
            space,
            evaluator.as_mut(),
            &SaConfig::new(sec.budget, cfg.seed),
            objective,
            ref_points.as_deref(),
        ),
        Strategy::Llm => {
            let backend: Box<dyn LlmBackend> = match &sec.backend {
                BackendSpec::MutationMock => Box::new(MutationMock::new(space.clone(), cfg.seed)),
                // setup problems are validation errors, not backend failures
                BackendSpec::Replay { transcript } => {
                    Box::new(ReplayBackend::new(Transcript::read(transcript).map_err(
                        |e| anyhow::anyhow!("loading transcript {}: {e}", transcript.display()),
                    )?))
                }
                BackendSpec::HttpChat(c) => {
                    Box::new(HttpChatBackend::new(c.clone()).map_err(|e| anyhow::anyhow!("{e}"))?)
                }
            };
            let explore_cfg = ExploreConfig {
                budget: sec.budget,
                batch: sec.batch,
                k: sec.k,
                seed: cfg.seed,
                mode: sec.mode,
            };
            let rec = recording.insert(Recording::new(backend));
            run_llm4dse(
                spec.kernel_id(),
                space,
                evaluator.as_mut(),
                rec,
                &explore_cfg,
                objective,
                ref_points.as_deref(),
            )
        }
    };
    if let (Some(path), Some(rec)) = (&sec.record, &recording) {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_out(parent)?;
        }
        rec.transcript
            .write(path)
            .map_err(|e| anyhow::anyhow!("writing transcript {}: {e}", path.display()))?;
    }
    let (state, failure) = match result {
        Ok(s) => (s, None),
        Err(ExploreError::Backend { source, partial }) => (*partial, Some(source)),
        Err(e) => return Err(e.into()),
    };
    write_exploration(&out, space, &state, objective)?;
    let summary = ExploreSummary {
        kernel: spec.kernel_id().to_string(),
        strategy: sec.strategy,
        evaluator: match &sec.evaluator {
            EvaluatorSpec::Oracle => "oracle".into(),
            EvaluatorSpec::Mpm { .. } => "mpm".into(),
        },
        budget: sec.budget,
        evaluations: state.evaluated.len(),
        rounds: state.iteration,
        fallback_rounds: state.history.iter().filter(|h| h.fallback).count(),
        archive_size: state.archive.len(),
        reference_size: reference.as_ref().map(|r| r.len()),
        final_adrs: state.history.last().and_then(|h| h.adrs),
        oracle_adrs: match (&sec.evaluator, &ref_points) {
            (EvaluatorSpec::Mpm { .. }, Some(r)) => rescored_adrs(&oracle, &state, objective, r)?,
            _ => None,
        },
        error: failure.as_ref().map(|e| e.to_string()),
    };
    mpmdse::doc::write(&out.join("summary.json"), &summary)?;
    if let Some(r) = &reference {
        write_front_csv(&out.join("reference.csv"), r, objective, |c| {
            space.config_hash(c)
        })?;
        emit_convergence(&state.history, &out.join("convergence.csv"))?;
    }
    println!(
        "{} evaluations, {} Pareto points{}",
        summary.evaluations,
        summary.archive_size,
        summary
            .final_adrs
            .map(|a| format!(", ADRS {a:.6}"))
            .unwrap_or_default()
    );

    let mut resolved = cfg.resolved();
    resolved.explore = Some(sec);
    write_resolved(&out, &resolved)?;
    if let Some(e) = failure {
        return Err(anyhow::Error::new(e).context("backend failed; partial results were written"));
    }
    if state.archive.is_empty() {
        return Err(EmptyArchive(state.evaluated.len()).into());
    }
    Ok(())
}

fn rescored_adrs(
    oracle: &Oracle,
    state: &ExplorationState,
    objective: ObjectiveMode,
    reference: &[Vec<f64>],
) -> Result<Option<f64>> {
    let caps = oracle.model().capacities;
    let mut front = ParetoArchive::new();
    for cfg in &state.order {
        let m = oracle.evaluate(cfg)?;
        if m.feasible {
            front.insert(cfg.clone(), objective.objectives(&m, &caps));
        }
    }
    if front.is_empty() {
        return Ok(None);
    }
    Ok(Some(adrs(reference, &front.objectives())?.adrs))
}

fn write_exploration(
    out: &Path,
    space: &DesignSpace,
    state: &ExplorationState,
    objective: ObjectiveMode,
) -> Result<()> {
    write_front_csv(&out.join("archive.csv"), &state.archive, objective, |c| {
        space.config_hash(c)
    })?;
    state.write_evaluated_csv(&out.join("evaluated.csv"), space)?;
    let mut w = csv::Writer::from_path(out.join("history.csv"))?;
    w.write_record([
        "iteration",
        "evaluations",
        "archive_size",
        "adrs",
        "fallback",
    ])?;
    for h in &state.history {
        w.write_record([
            h.iteration.to_string(),
            h.evaluations.to_string(),
            h.archive_size.to_string(),
            h.adrs.map(|a| format!("{a:.12}")).unwrap_or_default(),
            h.fallback.to_string(),
        ])?;
    }
    w.flush()?;
    info!("wrote exploration results to {}", out.display());
    Ok(())
}

/// Objective vectors of a front CSV, skipping its first column.
fn read_front(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)
        .with_context(|| format!("reading front {}", path.display()))?;
    let width = r.headers()?.len();
    ensure!(
        width >= 2,
        "{}: expected an identifier column and at least one objective",
        path.display()
    );
    let mut points = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let point = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| {
                format!(
                    "{}: row {} has a non-numeric objective",
                    path.display(),
                    line + 2
                )
            })?;
        ensure!(
            point.iter().all(|v| v.is_finite()),
            "{}: row {} has a non-finite objective",
            path.display(),
            line + 2
        );
        points.push(point);
    }
    Ok(points)
}

fn adrs_cmd(mut cfg: RunConfig, a: AdrsArgs) -> Result<()> {
    let mut sec: AdrsConfig = cfg.adrs.take().unwrap_or_default();
    if a.reference.is_some() {
        sec.reference = a.reference;
    }
    if a.approx.is_some() {
        sec.approx = a.approx;
    }
    let reference = read_front(required(&sec.reference, "reference front", "--reference")?)?;
    let approx = read_front(required(&sec.approx, "approximate front", "--approx")?)?;
    let report = adrs(&reference, &approx)?;
    let text = mpmdse::doc::to_string(&report);
    print!("{text}");
    if let Some(out) = cfg.out_dir.clone() {
        create_out(&out)?;
        fs::write(out.join("adrs.json"), text)?;
        let mut resolved = cfg.resolved();
        resolved.adrs = Some(sec);
        write_resolved(&out, &resolved)?;
    }
    Ok(())
}

/// Every file below `dir`, relative and sorted.
fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for entry in fs::read_dir(dir.join(&rel))
            .with_context(|| format!("listing {}", dir.join(&rel).display()))?
        {
            let entry = entry?;
            let path = rel.join(entry.file_name());
            if entry.file_type()?.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn report(mut cfg: RunConfig, a: ReportArgs) -> Result<()> {
    let mut sec: ReportConfig = cfg.report.take().unwrap_or_default();
    if a.run.is_some() {
        sec.run = a.run;
    }
    let run = required(&sec.run, "run directory", "--run")?.clone();
    ensure!(run.is_dir(), "{} is not a directory", run.display());
    let mut rows: Vec<(String, String, String)> = Vec::new();
    for rel in files_under(&run)? {
        let path = run.join(&rel);
        let source = rel.display().to_string();
        let mut push =
            |metric: &str, value: String| rows.push((source.clone(), metric.to_string(), value));
        match rel.file_name().and_then(|n| n.to_str()) {
            Some("metrics.csv") => {
                let mut r = csv::Reader::from_path(&path)?;
                let h = r.headers()?.clone();
                let col = |name: &str| h.iter().position(|c| c == name);
                let (Some(val), Some(tr)) = (col("val_rmse_all"), col("train_rmse_all")) else {
                    continue;
                };
                let mut epochs = 0usize;
                let mut best = (f64::INFINITY, 0usize);
                let mut last_train = f64::NAN;
                for rec in r.records() {
                    let rec = rec?;
                    epochs += 1;
                    let v: f64 = rec[val].parse()?;
                    if v < best.0 {
                        best = (v, rec[0].parse()?);
                    }
                    last_train = rec[tr].parse()?;
                }
                push("epochs", epochs.to_string());
                push("best_val_rmse_all", best.0.to_string());
                push("best_epoch", best.1.to_string());
                push("final_train_rmse_all", last_train.to_string());
            }
            Some("eval.csv") => {
                let mut r = csv::Reader::from_path(&path)?;
                let h = r.headers()?.clone();
                for rec in r.records() {
                    let rec = rec?;
                    for (name, v) in h.iter().zip(rec.iter()).skip(1) {
                        push(
                            &format!("{}_{}", &rec[0], name.to_lowercase()),
                            v.to_string(),
                        );
                    }
                }
            }
            Some("summary.json" | "adrs.json") => {
                let v: BTreeMap<String, serde_json::Value> = mpmdse::doc::read(&path)?;
                for (k, v) in v {
                    if !(v.is_array() || v.is_object() || v.is_null()) {
                        push(&k, v.to_string().trim_matches('"').to_string());
                    }
                }
            }
            _ => {}
        }
    }
    ensure!(
        !rows.is_empty(),
        "found no run outputs under {}",
        run.display()
    );
    let out = cfg.out_dir.clone().unwrap_or_else(|| run.clone());
    create_out(&out)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["source", "metric", "value"])?;
    for (s, m, v) in &rows {
        w.write_record([s, m, v])?;
    }
    let table = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    fs::write(out.join("report.csv"), &table)?;
    print!("{}", String::from_utf8_lossy(&table));
    let mut resolved = cfg.resolved();
    resolved.out_dir = Some(out.clone());
    resolved.report = Some(sec);
    write_resolved(&out, &resolved)
}
