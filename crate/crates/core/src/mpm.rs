//! Multimodal QoR predictor and its training loop.
//!
//! The full model encodes the graph with [`Ecognn`] into `h_G`, attends
//! from `h_G` (query) over the text embedding `h_S` (keys and values),
//! aligns both results, mixes them with a learned sigmoid gate and feeds
//! the mix to five independent heads (latency, LUT, DSP, FF, BRAM).
//! Graph-only and text-only variants skip the fusion.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdfg::{FeatureScale, DEFAULT_VOCAB};
use crate::dataset::{DatasetError, GraphTextSample, TargetNormalizer, NUM_TARGETS, TARGET_NAMES};
use crate::ecognn::{Ecognn, EcognnConfig, EcognnError, EncodeOptions, GraphBatch, Mode};
use crate::tensor::{
    read_checkpoint, write_checkpoint, AdamConfig, Linear, Mlp, ParamStore, Tape, Tensor,
    TensorError, Var,
};

#[derive(Debug, Error)]
pub enum MpmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EcognnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("target {target} of sample {sample} is zero; MAPE is undefined")]
    ZeroTarget { sample: usize, target: usize },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, MpmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    GraphOnly,
    TextOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpmConfig {
    pub variant: Variant,
    pub node_dim: usize,
    pub text_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_hidden: usize,
    pub temp_hidden: usize,
    pub tau_min: f64,
    pub feature_scale: FeatureScale,
    pub init_seed: u64,
}

impl MpmConfig {
    pub fn new(text_dim: usize) -> Self {
        Self {
            variant: Variant::Full,
            node_dim: DEFAULT_VOCAB.iter().sum::<u32>() as usize + 4,
            text_dim,
            hidden: 128,
            layers: 4,
            heads: 4,
            head_hidden: 64,
            temp_hidden: 32,
            tau_min: crate::ecognn::DEFAULT_TAU_MIN,
            feature_scale: FeatureScale::default(),
            init_seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(MpmError::Config(format!(
                "{} attention heads do not divide hidden width {}",
                self.heads, self.hidden
            )));
        }
        if self.text_dim == 0 || self.head_hidden == 0 {
            return Err(MpmError::Config("dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Multi-head attention with queries from the graph and keys/values from
/// the text sequence.
#[derive(Debug, Clone)]
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Mha {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        d_text: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            wk: Linear::new(store, &format!("{name}.k"), d_text, d, rng)?,
            wv: Linear::new(store, &format!("{name}.v"), d_text, d, rng)?,
            wo: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
            heads,
        })
    }

    /// `h_g` is `B × d`; `h_s` is `(B·len) × d_text` with each sample's
    /// tokens in consecutive rows.
    pub fn forward(&self, tape: &mut Tape<'_>, h_g: Var, h_s: Var, len: usize) -> Result<Var> {
        let b = tape.value(h_g).rows();
        if len == 0 || tape.value(h_s).rows() != b * len {
            return Err(MpmError::Input(format!(
                "text sequence has {} rows for {b} samples of length {len}",
                tape.value(h_s).rows()
            )));
        }
        let d = self.wq.out_dim;
        let dh = d / self.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(tape, h_g)?;
        let k = self.wk.forward(tape, h_s)?;
        let v = self.wv.forward(tape, h_s)?;
        let concat = if len == 1 {
            let ones = tape.constant(Tensor::filled(dh, 1, 1.0));
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                let qk = tape.mul(qh, kh)?;
                let s = tape.matmul(qk, ones)?;
                let s = tape.scale(s, inv)?;
                let att = tape.softmax(s)?;
                heads.push(tape.mul(vh, att)?);
            }
            tape.concat(&heads)?
        } else {
            let mut rows = Vec::with_capacity(b);
            for i in 0..b {
                let qi = tape.row_gather(q, &[i])?;
                let idx: Vec<usize> = (i * len..(i + 1) * len).collect();
                let ki = tape.row_gather(k, &idx)?;
                let vi = tape.row_gather(v, &idx)?;
                let mut heads = Vec::with_capacity(self.heads);
                for h in 0..self.heads {
                    let qh = tape.slice_cols(qi, h * dh, dh)?;
                    let kh = tape.slice_cols(ki, h * dh, dh)?;
                    let vh = tape.slice_cols(vi, h * dh, dh)?;
                    let kt = tape.transpose(kh)?;
                    let s = tape.matmul(qh, kt)?;
                    let s = tape.scale(s, inv)?;
                    let att = tape.softmax(s)?;
                    heads.push(tape.matmul(att, vh)?);
                }
                rows.push(tape.concat(&heads)?);
            }
            tape.concat_rows(&rows)?
        };
        Ok(self.wo.forward(tape, concat)?)
    }
}

/// `g ⊙ a + (1 − g) ⊙ b` with `g = sigmoid(gate(concat(a, b)))`.
pub fn gated_combine(tape: &mut Tape<'_>, gate: &Mlp, a: Var, b: Var) -> Result<Var> {
    let cat = tape.concat(&[a, b])?;
    let g = gate.forward(tape, cat)?;
    let g = tape.sigmoid(g)?;
    let ga = tape.mul(a, g)?;
    let h = tape.one_minus(g)?;
    let hb = tape.mul(b, h)?;
    Ok(tape.add(ga, hb)?)
}

/// Model input with graph features already encoded.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub graph: GraphBatch,
    /// `len × d_text`.
    pub text: Tensor,
    pub targets: [f64; NUM_TARGETS],
}

#[derive(Debug, Clone)]
pub struct Mpm {
    pub config: MpmConfig,
    pub store: ParamStore,
    pub encoder: Option<Ecognn>,
    pub attention: Option<Mha>,
    pub align_graph: Option<Mlp>,
    pub align_fuse: Option<Mlp>,
    pub gate: Option<Mlp>,
    pub align_text: Option<Mlp>,
    pub heads: Vec<Mlp>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QorPrediction {
    pub normalized: [f64; NUM_TARGETS],
    pub denormalized: [u64; NUM_TARGETS],
}

impl Mpm {
    pub fn new(config: MpmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let d = config.hidden;
        let uses_graph = config.variant != Variant::TextOnly;
        let full = config.variant == Variant::Full;
        let encoder = if uses_graph {
            let ec = EcognnConfig {
                in_dim: config.node_dim,
                hidden: d,
                layers: config.layers,
                temp_hidden: config.temp_hidden,
                tau_min: config.tau_min,
            };
            Some(Ecognn::new(&mut store, "ecognn", ec, &mut rng)?)
        } else {
            None
        };
        let (attention, align_graph, align_fuse, gate) = if full {
            (
                Some(Mha::new(
                    &mut store,
                    "mha",
                    d,
                    config.text_dim,
                    config.heads,
                    &mut rng,
                )?),
                Some(Mlp::new(&mut store, "align_graph", &[d, d, d], &mut rng)?),
                Some(Mlp::new(&mut store, "align_fuse", &[d, d, d], &mut rng)?),
                Some(Mlp::new(&mut store, "gate", &[2 * d, d], &mut rng)?),
            )
        } else {
            (None, None, None, None)
        };
        let align_text = if config.variant == Variant::TextOnly {
            Some(Mlp::new(
                &mut store,
                "align_text",
                &[config.text_dim, d, d],
                &mut rng,
            )?)
        } else {
            None
        };
        let heads = TARGET_NAMES
            .iter()
            .map(|t| {
                Mlp::new(
                    &mut store,
                    &format!("head.{t}"),
                    &[d, config.head_hidden, 1],
                    &mut rng,
                )
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            config,
            store,
            encoder,
            attention,
            align_graph,
            align_fuse,
            gate,
            align_text,
            heads,
        })
    }

    pub fn prepare(&self, s: &GraphTextSample) -> Result<PreparedSample> {
        if s.text_embedding.len() != self.config.text_dim {
            return Err(MpmError::Input(format!(
                "sample {} has text dimension {}, model expects {}",
                s.config_hash,
                s.text_embedding.len(),
                self.config.text_dim
            )));
        }
        Ok(PreparedSample {
            graph: GraphBatch::from_graphs(&[&s.graph], &self.config.feature_scale)?,
            text: Tensor::row(&s.text_embedding),
            targets: s.targets,
        })
    }

    pub fn prepare_all(&self, samples: &[GraphTextSample]) -> Result<Vec<PreparedSample>> {
        samples.iter().map(|s| self.prepare(s)).collect()
    }

    /// Graph embedding `h_G` of the batch.
    pub fn encode_graphs(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&PreparedSample],
        opts: &EncodeOptions,
    ) -> Result<Var> {
        let enc = self
            .encoder
            .as_ref()
            .ok_or_else(|| MpmError::Config("variant has no graph encoder".into()))?;
        let graphs: Vec<&GraphBatch> = batch.iter().map(|s| &s.graph).collect();
        let g = GraphBatch::concat(&graphs)?;
        Ok(enc.encode(tape, &g, opts)?.graph_embedding)
    }

    fn text_rows(&self, tape: &mut Tape<'_>, batch: &[&PreparedSample]) -> Result<(Var, usize)> {
        let len = batch[0].text.rows();
        let mut data = Vec::with_capacity(batch.len() * len * self.config.text_dim);
        for s in batch {
            if s.text.rows() != len || s.text.cols() != self.config.text_dim {
                return Err(MpmError::Input(
                    "text sequences in a batch must share a shape".into(),
                ));
            }
            data.extend_from_slice(s.text.data());
        }
        let t = Tensor::matrix(batch.len() * len, self.config.text_dim, data)?;
        Ok((tape.constant(t), len))
    }

    /// The fused representation fed to the heads, `B × hidden`.
    pub fn fused(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&PreparedSample],
        opts: &EncodeOptions,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(MpmError::Input("empty batch".into()));
        }
        match self.config.variant {
            Variant::GraphOnly => self.encode_graphs(tape, batch, opts),
            Variant::TextOnly => {
                let (t, len) = self.text_rows(tape, batch)?;
                if len != 1 {
                    return Err(MpmError::Input(
                        "text-only variant takes pooled embeddings".into(),
                    ));
                }
                Ok(self.align_text.as_ref().unwrap().forward(tape, t)?)
            }
            Variant::Full => {
                let h_g = self.encode_graphs(tape, batch, opts)?;
                let (h_s, len) = self.text_rows(tape, batch)?;
                let fuse = self
                    .attention
                    .as_ref()
                    .unwrap()
                    .forward(tape, h_g, h_s, len)?;
                let a = self.align_graph.as_ref().unwrap().forward(tape, h_g)?;
                let b = self.align_fuse.as_ref().unwrap().forward(tape, fuse)?;
                gated_combine(tape, self.gate.as_ref().unwrap(), a, b)
            }
        }
    }

    /// Normalised predictions, `B × 5`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&PreparedSample],
        opts: &EncodeOptions,
    ) -> Result<Var> {
        let h = self.fused(tape, batch, opts)?;
        let outs = self
            .heads
            .iter()
            .map(|head| head.forward(tape, h))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(tape.concat(&outs)?)
    }

    /// Eval-mode predictions in batches of 64.
    pub fn predict(
        &self,
        samples: &[PreparedSample],
        normalizer: &TargetNormalizer,
    ) -> Result<Vec<QorPrediction>> {
        let raw = predict_rows(self, samples, 64)?;
        Ok(raw
            .into_iter()
            .map(|normalized| QorPrediction {
                normalized,
                denormalized: normalizer.denormalize(&normalized),
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::to_string(&self.config).expect("config serialises");
        Ok(write_checkpoint(path, &self.store, &manifest)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, manifest) = read_checkpoint(path)?;
        let config: MpmConfig = crate::doc::from_str(&manifest, &path.display().to_string())
            .map_err(|e| MpmError::Config(e.to_string()))?;
        let mut model = Self::new(config)?;
        if store.len() != model.store.len() {
            return Err(MpmError::Config(format!(
                "checkpoint holds {} tensors, model has {}",
                store.len(),
                model.store.len()
            )));
        }
        model.store.load_values(&store)?;
        Ok(model)
    }
}

/// A model trainable by [`train`].
pub trait Regressor {
    type Input;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Predictions `B × T` for a batch.
    fn forward_batch(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&Self::Input],
        mode: Mode,
        seed: u64,
    ) -> Result<Var>;
    fn targets(input: &Self::Input) -> &[f64];
}

impl Regressor for Mpm {
    type Input = PreparedSample;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward_batch(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&PreparedSample],
        mode: Mode,
        seed: u64,
    ) -> Result<Var> {
        let opts = EncodeOptions {
            mode,
            seed,
            clamp: None,
        };
        self.forward(tape, batch, &opts)
    }

    fn targets(input: &PreparedSample) -> &[f64] {
        &input.targets
    }
}

/// Eval-mode predictions row by row.
pub fn predict_rows<R: Regressor>(
    model: &R,
    inputs: &[R::Input],
    batch: usize,
) -> Result<Vec<[f64; NUM_TARGETS]>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch.max(1)) {
        let refs: Vec<&R::Input> = chunk.iter().collect();
        let mut tape = Tape::new(model.params());
        let p = model.forward_batch(&mut tape, &refs, Mode::Eval, 0)?;
        let t = tape.value(p);
        for r in 0..t.rows() {
            let mut row = [0.0; NUM_TARGETS];
            for (c, v) in row.iter_mut().enumerate().take(t.cols()) {
                *v = t.get(r, c);
            }
            out.push(row);
        }
    }
    Ok(out)
}

/// Per-target errors plus their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TargetErrors {
    pub per_target: [f64; NUM_TARGETS],
    pub all: f64,
}

impl TargetErrors {
    fn from_per_target(per_target: [f64; NUM_TARGETS]) -> Self {
        Self {
            per_target,
            all: per_target.iter().sum(),
        }
    }
}

/// Root-mean-square error of one column.
pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(MpmError::Input(format!(
            "rmse needs equal non-empty inputs, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let se: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((se / preds.len() as f64).sqrt())
}

/// Mean absolute percentage error of one column, as a fraction.
pub fn mape(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(MpmError::Input(format!(
            "mape needs equal non-empty inputs, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let mut s = 0.0;
    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        if *t == 0.0 {
            return Err(MpmError::ZeroTarget {
                sample: i,
                target: 0,
            });
        }
        s += ((p - t) / t).abs();
    }
    Ok(s / preds.len() as f64)
}

fn column(rows: &[[f64; NUM_TARGETS]], c: usize) -> Vec<f64> {
    rows.iter().map(|r| r[c]).collect()
}

pub fn rmse_table(
    preds: &[[f64; NUM_TARGETS]],
    targets: &[[f64; NUM_TARGETS]],
) -> Result<TargetErrors> {
    let mut per = [0.0; NUM_TARGETS];
    for (c, v) in per.iter_mut().enumerate() {
        *v = rmse(&column(preds, c), &column(targets, c))?;
    }
    Ok(TargetErrors::from_per_target(per))
}

pub fn mape_table(
    preds: &[[f64; NUM_TARGETS]],
    targets: &[[f64; NUM_TARGETS]],
) -> Result<TargetErrors> {
    let mut per = [0.0; NUM_TARGETS];
    for (c, v) in per.iter_mut().enumerate() {
        *v = mape(&column(preds, c), &column(targets, c)).map_err(|e| match e {
            MpmError::ZeroTarget { sample, .. } => MpmError::ZeroTarget { sample, target: c },
            other => other,
        })?;
    }
    Ok(TargetErrors::from_per_target(per))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop once the validation sum of RMSEs falls below this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_rmse: Option<f64>,
    /// Written whenever validation improves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch: 64,
            lr: 1e-3,
            seed: 0,
            target_rmse: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: TargetErrors,
    pub val: TargetErrors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (epoch as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ (batch as u64).wrapping_mul(0x94d0_49bb_1331_11eb)
}

fn targets_of<R: Regressor>(inputs: &[R::Input]) -> Vec<[f64; NUM_TARGETS]> {
    inputs
        .iter()
        .map(|s| {
            let mut row = [0.0; NUM_TARGETS];
            for (r, t) in row.iter_mut().zip(R::targets(s)) {
                *r = *t;
            }
            row
        })
        .collect()
}

/// Minibatch Adam on the summed per-target RMSE. Validation runs after
/// every epoch (on the training set when `val` is empty); the parameters
/// with the lowest validation error are restored before returning.
pub fn train<R: Regressor>(
    model: &mut R,
    train_set: &[R::Input],
    val: &[R::Input],
    cfg: &TrainConfig,
) -> Result<TrainHistory>
where
    R: Checkpointable,
{
    if train_set.is_empty() {
        return Err(MpmError::Input("training set is empty".into()));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(MpmError::Config(
            "batch size and epochs must be positive".into(),
        ));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let monitor = if val.is_empty() { train_set } else { val };
    let monitor_targets = targets_of::<R>(monitor);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sq = [0.0; NUM_TARGETS];
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<&R::Input> = chunk.iter().map(|&i| &train_set[i]).collect();
            let grads = {
                let mut tape = Tape::new(model.params());
                let p = model.forward_batch(
                    &mut tape,
                    &batch,
                    Mode::Train,
                    batch_seed(cfg.seed, epoch, bi),
                )?;
                let (loss, seed, batch_sq) = rmse_loss_and_grad::<R>(tape.value(p), &batch)?;
                if !loss.is_finite() {
                    return Err(MpmError::Diverged { epoch, loss });
                }
                for (a, b) in sq.iter_mut().zip(batch_sq) {
                    *a += b;
                }
                tape.backward_full(p, seed)?.into_params()
            };
            let store = model.params_mut();
            store.accumulate(&grads);
            store.adam_step(&adam);
        }
        let n = train_set.len() as f64;
        let train_err = TargetErrors::from_per_target(sq.map(|s| (s / n).sqrt()));
        let preds = predict_rows(model, monitor, cfg.batch)?;
        let val_err = rmse_table(&preds, &monitor_targets)?;
        if !val_err.all.is_finite() {
            return Err(MpmError::Diverged {
                epoch,
                loss: val_err.all,
            });
        }
        history.push(EpochRecord {
            epoch,
            train: train_err,
            val: val_err,
        });
        if best.as_ref().map_or(true, |b| val_err.all < b.0) {
            if let Some(path) = &cfg.checkpoint {
                model.save_checkpoint(path)?;
            }
            best = Some((val_err.all, epoch, model.params().clone()));
        }
        if cfg.target_rmse.is_some_and(|t| val_err.all < t) {
            break;
        }
    }
    let (best_val, best_epoch, store) = best.expect("at least one epoch ran");
    model.params_mut().load_values(&store)?;
    Ok(TrainHistory {
        epochs: history,
        best_epoch,
        best_val,
    })
}

/// Loss, its gradient with respect to the predictions and the per-target
/// squared-error sums of the batch.
fn rmse_loss_and_grad<R: Regressor>(
    preds: &Tensor,
    batch: &[&R::Input],
) -> Result<(f64, Tensor, [f64; NUM_TARGETS])> {
    let (b, t) = (preds.rows(), preds.cols());
    let mut sq = [0.0; NUM_TARGETS];
    for (i, s) in batch.iter().enumerate() {
        let y = R::targets(s);
        if y.len() != t {
            return Err(MpmError::Input(format!(
                "model emits {t} targets, sample has {}",
                y.len()
            )));
        }
        for c in 0..t {
            let d = preds.get(i, c) - y[c];
            sq[c] += d * d;
        }
    }
    let rm: Vec<f64> = sq[..t].iter().map(|s| (s / b as f64).sqrt()).collect();
    let loss = rm.iter().sum();
    let mut g = Tensor::zeros(b, t);
    for (i, s) in batch.iter().enumerate() {
        let y = R::targets(s);
        for c in 0..t {
            if rm[c] > 0.0 {
                g.data_mut()[i * t + c] = (preds.get(i, c) - y[c]) / (b as f64 * rm[c]);
            }
        }
    }
    Ok((loss, g, sq))
}

/// Persisting the parameters during training.
pub trait Checkpointable {
    fn save_checkpoint(&self, path: &Path) -> Result<()>;
}

impl Checkpointable for Mpm {
    fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.save(path)
    }
}

/// `epoch`, then train and validation RMSE per target and their sums.
pub fn write_metrics_csv(path: &Path, history: &TrainHistory) -> Result<()> {
    let io = |e: String| MpmError::Io {
        path: path.display().to_string(),
        message: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.to_string()))?;
    let mut header = vec!["epoch".to_string()];
    for split in ["train", "val"] {
        for t in TARGET_NAMES {
            header.push(format!("{split}_rmse_{t}"));
        }
        header.push(format!("{split}_rmse_all"));
    }
    w.write_record(&header).map_err(|e| io(e.to_string()))?;
    for r in &history.epochs {
        let mut row = vec![r.epoch.to_string()];
        for e in [&r.train, &r.val] {
            row.extend(e.per_target.iter().map(|v| v.to_string()));
            row.push(e.all.to_string());
        }
        w.write_record(&row).map_err(|e| io(e.to_string()))?;
    }
    w.flush().map_err(|e| io(e.to_string()))
}

/// Table with columns Latency, LUT, DSP, FF, BRAM, All.
pub fn write_error_table(
    out: &mut dyn Write,
    rows: &[(&str, TargetErrors)],
) -> std::io::Result<()> {
    writeln!(out, "metric,Latency,LUT,DSP,FF,BRAM,All")?;
    for (name, e) in rows {
        write!(out, "{name}")?;
        for v in e.per_target {
            write!(out, ",{v:.4}")?;
        }
        writeln!(out, ",{:.4}", e.all)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, FdConfig};
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn mha(d: usize, dt: usize, heads: usize) -> (ParamStore, Mha) {
        let mut store = ParamStore::new();
        let m = Mha::new(
            &mut store,
            "m",
            d,
            dt,
            heads,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        (store, m)
    }

    #[test]
    fn single_token_attention_ignores_query() {
        let (store, m) = mha(8, 6, 4);
        let hs = random(1, 6, 1);
        let mut tape = Tape::new(&store);
        let s = tape.constant(hs);
        let q1 = tape.constant(random(1, 8, 2));
        let q2 = tape.constant(random(1, 8, 3));
        let a = m.forward(&mut tape, q1, s, 1).unwrap();
        let b = m.forward(&mut tape, q2, s, 1).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-15);
        let v = m.wv.forward(&mut tape, s).unwrap();
        let want = m.wo.forward(&mut tape, v).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(want)) < 1e-15);
    }

    #[test]
    fn zero_text_gives_zero_fusion() {
        let (store, m) = mha(8, 6, 4);
        let mut tape = Tape::new(&store);
        let s = tape.constant(Tensor::zeros(1, 6));
        let q = tape.constant(random(1, 8, 2));
        let a = m.forward(&mut tape, q, s, 1).unwrap();
        assert!(tape.value(a).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_token_attention_matches_direct_softmax() {
        let (store, m) = mha(4, 3, 2);
        let hg = random(1, 4, 7);
        let hs = random(3, 3, 8);
        let mut tape = Tape::new(&store);
        let q = tape.constant(hg.clone());
        let s = tape.constant(hs.clone());
        let out = m.forward(&mut tape, q, s, 3).unwrap();

        let lin = |x: &Tensor, l: &Linear| -> Tensor {
            let w = store.value(l.weight);
            let b = store.value(l.bias);
            let mut y = x.matmul(w).unwrap();
            let cols = y.cols();
            for r in 0..y.rows() {
                for c in 0..cols {
                    y.data_mut()[r * cols + c] += b.get(0, c);
                }
            }
            y
        };
        let (qm, km, vm) = (lin(&hg, &m.wq), lin(&hs, &m.wk), lin(&hs, &m.wv));
        let mut cat = vec![0.0; 4];
        for h in 0..2 {
            let scores: Vec<f64> = (0..3)
                .map(|j| {
                    (0..2)
                        .map(|c| qm.get(0, h * 2 + c) * km.get(j, h * 2 + c))
                        .sum::<f64>()
                        / 2f64.sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..2 {
                cat[h * 2 + c] = (0..3).map(|j| e[j] / z * vm.get(j, h * 2 + c)).sum();
            }
        }
        let want = lin(&Tensor::row(&cat), &m.wo);
        assert!(tape.value(out).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn gate_saturation_and_convexity() {
        let mut store = ParamStore::new();
        let gate = Mlp::new(&mut store, "g", &[6, 3], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = random(2, 3, 1);
        let b = random(2, 3, 2);
        for (bias, expect_a) in [(1e3, true), (-1e3, false)] {
            let mut s = store.clone();
            *s.value_mut(gate.layers[0].bias) = Tensor::filled(1, 3, bias);
            let mut tape = Tape::new(&s);
            let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let out = gated_combine(&mut tape, &gate, av, bv).unwrap();
            let want = if expect_a { &a } else { &b };
            assert!(tape.value(out).max_abs_diff(want) < 1e-12);
        }
        let mut tape = Tape::new(&store);
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let out = gated_combine(&mut tape, &gate, av, bv).unwrap();
        let cat = tape.concat(&[av, bv]).unwrap();
        let g = gate.forward(&mut tape, cat).unwrap();
        for i in 0..6 {
            let gi = 1.0 / (1.0 + (-tape.value(g).data()[i]).exp());
            let want = gi * a.data()[i] + (1.0 - gi) * b.data()[i];
            assert!((tape.value(out).data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0], &[3.0]).unwrap(), 3.0);
        assert!(matches!(
            mape(&[1.0], &[0.0]),
            Err(MpmError::ZeroTarget { .. })
        ));
    }

    #[test]
    fn all_column_is_the_sum() {
        let e = TargetErrors::from_per_target([0.3870, 0.0004, 0.0004, 0.0015, 0.0005]);
        assert!((e.all - 0.3898).abs() < 1e-12);
    }

    fn toy_sample(seed: u64, text_dim: usize) -> PreparedSample {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = 4;
        let feats =
            Tensor::matrix(n, 27, (0..n * 27).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        PreparedSample {
            graph: GraphBatch::new(feats, &[(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap(),
            text: random(1, text_dim, seed + 100),
            targets: [0.5, 0.1, 0.2, 0.3, 0.4],
        }
    }

    fn small(variant: Variant) -> Mpm {
        let mut c = MpmConfig::new(8);
        c.variant = variant;
        c.node_dim = 27;
        c.hidden = 8;
        c.layers = 2;
        c.head_hidden = 4;
        c.temp_hidden = 4;
        Mpm::new(c).unwrap()
    }

    #[test]
    fn node_dim_default_matches_feature_encoding() {
        assert_eq!(MpmConfig::new(8).node_dim, 23);
    }

    #[test]
    fn fused_model_gradients_match_finite_differences() {
        let mut m = small(Variant::Full);
        let samples = [toy_sample(1, 8), toy_sample(2, 8)];
        let model = m.clone();
        let report = finite_diff_check(
            &mut m.store,
            |tape| {
                let refs: Vec<&PreparedSample> = samples.iter().collect();
                let p = model.forward(tape, &refs, &EncodeOptions::train(9))?;
                let y = tape.constant(Tensor::from_rows(
                    &samples
                        .iter()
                        .map(|s| s.targets.to_vec())
                        .collect::<Vec<_>>(),
                )?);
                let d = tape.sub(p, y)?;
                let sq = tape.square(d)?;
                Ok::<_, MpmError>(tape.sum_all(sq)?)
            },
            &FdConfig::default(),
        )
        .unwrap();
        assert!(report.passes(1e-3), "{:?}", report.worst());
    }

    #[test]
    fn variants_predict_five_finite_values() {
        for v in [Variant::Full, Variant::GraphOnly, Variant::TextOnly] {
            let m = small(v);
            let s = [toy_sample(3, 8), toy_sample(3, 8)];
            let rows = predict_rows(&m, &s, 64).unwrap();
            assert_eq!(rows[0].len(), 5);
            assert!(rows[0].iter().all(|x| x.is_finite()));
            assert_eq!(rows[0], rows[1]);
        }
    }

    #[test]
    fn checkpoint_round_trip_predicts_identically() {
        let m = small(Variant::Full);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Mpm::load(&path).unwrap();
        let s = [toy_sample(4, 8)];
        assert_eq!(
            predict_rows(&m, &s, 8).unwrap(),
            predict_rows(&back, &s, 8).unwrap()
        );
    }

    /// `y = x W + b` with scalar output repeated over five targets.
    struct LinearToy {
        store: ParamStore,
        layer: Linear,
    }

    impl Regressor for LinearToy {
        type Input = (Vec<f64>, [f64; 5]);
        fn params(&self) -> &ParamStore {
            &self.store
        }
        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.store
        }
        fn forward_batch(
            &self,
            tape: &mut Tape<'_>,
            batch: &[&Self::Input],
            _: Mode,
            _: u64,
        ) -> Result<Var> {
            let x = Tensor::from_rows(&batch.iter().map(|b| b.0.clone()).collect::<Vec<_>>())?;
            let x = tape.constant(x);
            Ok(self.layer.forward(tape, x)?)
        }
        fn targets(input: &Self::Input) -> &[f64] {
            &input.1
        }
    }

    impl Checkpointable for LinearToy {
        fn save_checkpoint(&self, _: &Path) -> Result<()> {
            Ok(())
        }
    }

    fn linear_toy() -> (LinearToy, Vec<(Vec<f64>, [f64; 5])>) {
        let mut store = ParamStore::new();
        let layer =
            Linear::new(&mut store, "lin", 3, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let data = (0..16)
            .map(|_| {
                let x: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
                let y = 2.0 * x[0] - x[1] + 0.5 * x[2] + 0.3;
                (x, [y; 5])
            })
            .collect();
        (LinearToy { store, layer }, data)
    }

    #[test]
    fn one_epoch_reduces_linear_toy_loss() {
        let (mut toy, data) = linear_toy();
        let before = rmse_table(
            &predict_rows(&toy, &data, 64).unwrap(),
            &targets_of::<LinearToy>(&data),
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch: 64,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let h = train(&mut toy, &data, &[], &cfg).unwrap();
        assert_eq!(h.epochs.len(), 1);
        assert!(h.best_val < before.all);
    }

    #[test]
    fn history_length_and_best_checkpoint() {
        let (mut toy, data) = linear_toy();
        let cfg = TrainConfig {
            epochs: 30,
            batch: 4,
            lr: 0.01,
            ..TrainConfig::default()
        };
        let h = train(&mut toy, &data, &data[..4], &cfg).unwrap();
        assert_eq!(h.epochs.len(), 30);
        let min = h
            .epochs
            .iter()
            .map(|e| e.val.all)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(h.best_val, min);
        let now = rmse_table(
            &predict_rows(&toy, &data[..4], 64).unwrap(),
            &targets_of::<LinearToy>(&data[..4]),
        )
        .unwrap();
        assert!((now.all - min).abs() < 1e-12);
    }

    #[test]
    fn divergence_reports_epoch() {
        let (mut toy, mut data) = linear_toy();
        data[0].1 = [f64::NAN; 5];
        let err = train(
            &mut toy,
            &data,
            &[],
            &TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, MpmError::Diverged { epoch: 0, .. }));
    }
}
