//! Graph/text training samples, target normalisation and dataset files.
//!
//! Targets are ordered latency, LUT, DSP, FF, BRAM. Resources are scaled by
//! platform capacity; latency by `ln(1 + c) / ln(1 + c_max)`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdfg::{Cdfg, CdfgError};
use crate::doc::DocError;
use crate::oracle::{QorMetrics, Resources};
use crate::textembed::{EmbedError, EmbeddingCache};

pub const TARGET_NAMES: [&str; 5] = ["latency", "lut", "dsp", "ff", "bram"];
pub const NUM_TARGETS: usize = 5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("need at least 10 samples to split, got {0}")]
    TooFewSamples(usize),
    #[error("sample {index}: {message}")]
    Sample { index: usize, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Doc(#[from] DocError),
    #[error(transparent)]
    Graph(#[from] CdfgError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphTextSample {
    pub kernel_id: String,
    pub config_hash: String,
    pub config: Vec<usize>,
    pub graph: Cdfg,
    pub text_embedding: Vec<f64>,
    pub metrics: QorMetrics,
    pub targets: [f64; NUM_TARGETS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetNormalizer {
    pub capacities: Resources,
    pub c_max: u64,
}

impl TargetNormalizer {
    pub fn normalize(&self, m: &QorMetrics) -> [f64; NUM_TARGETS] {
        let cap = self.capacities.as_array();
        let res = m.resources().as_array();
        [
            (m.latency_cycles as f64).ln_1p() / (self.c_max.max(1) as f64).ln_1p(),
            res[0] as f64 / cap[0] as f64,
            res[1] as f64 / cap[1] as f64,
            res[2] as f64 / cap[2] as f64,
            res[3] as f64 / cap[3] as f64,
        ]
    }

    /// Inverse of [`normalize`](Self::normalize), rounded to whole units.
    /// Negative predictions clamp to zero cycles/resources.
    pub fn denormalize(&self, t: &[f64; NUM_TARGETS]) -> [u64; NUM_TARGETS] {
        let cap = self.capacities.as_array();
        let lat = (t[0] * (self.c_max.max(1) as f64).ln_1p()).exp_m1();
        let round = |x: f64| {
            if x.is_finite() {
                x.round().max(0.0) as u64
            } else {
                u64::MAX
            }
        };
        [
            round(lat),
            round(t[1] * cap[0] as f64),
            round(t[2] * cap[1] as f64),
            round(t[3] * cap[2] as f64),
            round(t[4] * cap[3] as f64),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub normalizer: TargetNormalizer,
    pub samples: Vec<GraphTextSample>,
}

impl Dataset {
    /// Recomputes every target from the stored metrics.
    pub fn renormalize(&mut self) {
        for s in &mut self.samples {
            s.targets = self.normalizer.normalize(&s.metrics);
        }
    }

    /// Concatenates datasets under a common normaliser covering all of them.
    pub fn combine(parts: Vec<Dataset>) -> Result<Dataset, DatasetError> {
        let first = parts.first().ok_or(DatasetError::Empty)?;
        let capacities = first.normalizer.capacities;
        let c_max = parts.iter().map(|p| p.normalizer.c_max).max().unwrap_or(1);
        let mut ds = Dataset {
            normalizer: TargetNormalizer { capacities, c_max },
            samples: parts.into_iter().flat_map(|p| p.samples).collect(),
        };
        ds.renormalize();
        Ok(ds)
    }

    /// Writes `manifest.json`, one graph document per sample under
    /// `graphs/` and all text embeddings to `embeddings.bin`.
    pub fn write_dir(&self, dir: &Path, name: &str) -> Result<(), DatasetError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| DatasetError::Io { path, source }
        };
        let graphs = dir.join("graphs");
        std::fs::create_dir_all(&graphs).map_err(io(&graphs))?;
        let mut cache = EmbeddingCache::new();
        let mut entries = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let file = format!("graphs/{}_{}.json", s.kernel_id, s.config_hash);
            s.graph.write(&dir.join(&file))?;
            let key = embedding_key(&s.text_embedding);
            cache.put(key.clone(), s.text_embedding.clone());
            entries.push(ManifestSample {
                kernel_id: s.kernel_id.clone(),
                config_hash: s.config_hash.clone(),
                config: s.config.clone(),
                graph: file,
                embedding_key: key,
                metrics: s.metrics,
                targets: s.targets,
            });
        }
        cache.save(&dir.join("embeddings.bin"))?;
        let manifest = DatasetManifest {
            kernel_id: name.to_string(),
            capacities: self.normalizer.capacities,
            c_max: self.normalizer.c_max,
            samples: entries,
        };
        crate::doc::write(&dir.join("manifest.json"), &manifest)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Dataset, DatasetError> {
        let manifest: DatasetManifest = crate::doc::read(&dir.join("manifest.json"))?;
        let cache = EmbeddingCache::load(&dir.join("embeddings.bin"))?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for (index, e) in manifest.samples.into_iter().enumerate() {
            let graph = Cdfg::read(&dir.join(&e.graph))?;
            let text_embedding = cache
                .get(&e.embedding_key)
                .ok_or_else(|| DatasetError::Sample {
                    index,
                    message: format!("embedding `{}` missing from cache", e.embedding_key),
                })?
                .to_vec();
            samples.push(GraphTextSample {
                kernel_id: e.kernel_id,
                config_hash: e.config_hash,
                config: e.config,
                graph,
                text_embedding,
                metrics: e.metrics,
                targets: e.targets,
            });
        }
        Ok(Dataset {
            normalizer: TargetNormalizer {
                capacities: manifest.capacities,
                c_max: manifest.c_max,
            },
            samples,
        })
    }
}

/// Content key of an embedding vector (hash of its little-endian bytes).
pub fn embedding_key(v: &[f64]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub kernel_id: String,
    pub config_hash: String,
    pub config: Vec<usize>,
    pub graph: String,
    pub embedding_key: String,
    pub metrics: QorMetrics,
    pub targets: [f64; NUM_TARGETS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub kernel_id: String,
    pub capacities: Resources,
    pub c_max: u64,
    pub samples: Vec<ManifestSample>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded shuffle, then 70/15/15 with the rounding remainder in train.
pub fn split_indices(n: usize, seed: u64) -> Result<SplitIndices, DatasetError> {
    if n < 10 {
        return Err(DatasetError::TooFewSamples(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = n * 15 / 100;
    let val = idx.split_off(n - held);
    let test = idx.split_off(n - 2 * held);
    Ok(SplitIndices {
        train: idx,
        test,
        val,
    })
}

/// [`split_indices`] applied to a slice: `(train, test, val)`.
pub fn split_dataset<T: Clone>(
    samples: &[T],
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), DatasetError> {
    let s = split_indices(samples.len(), seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&s.train), pick(&s.test), pick(&s.val)))
}
