//! Text embeddings for merged kernel sources.
//!
//! Providers implement [`TextEmbedder`]; downstream code only sees the
//! resulting [`TextEmbedding`]. Two providers ship: a hashed bag of
//! unigrams/bigrams that runs without model weights, and a lookup into
//! precomputed vectors (e.g. exported from a code language model).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_TEXT_DIM: usize = 768;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("layer stack is empty")]
    EmptyStack,
    #[error("layer {layer} has dimension {got}, expected {expected}")]
    RaggedStack {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("embedding dimension must be at least 8, got {0}")]
    DimTooSmall(usize),
    #[error("corrupt cache entry `{key}`: {reason}")]
    Corrupt { key: String, reason: String },
    #[error("cache key `{0}` is not a 64-character hex content hash")]
    BadKey(String),
    #[error("no precomputed embedding for key `{0}`")]
    Missing(String),
    #[error("embedding has non-finite values")]
    NonFinite,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Doc(#[from] crate::doc::DocError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub provider_id: String,
    pub vector: Vec<f64>,
}

impl TextEmbedding {
    pub fn new(provider_id: impl Into<String>, vector: Vec<f64>) -> Result<Self, EmbedError> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self {
            provider_id: provider_id.into(),
            vector,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-layer CLS hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerClsStack {
    pub layers: Vec<Vec<f64>>,
}

/// How the per-layer CLS vectors are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClsPooling {
    /// Mean over the `l` transformer layers.
    #[default]
    LayerMean,
    /// The stack holds the embedding layer first plus `l` layers; all
    /// `l + 1` vectors are summed and divided by `l`.
    SumOverLayers,
}

/// Elementwise mean of the layer vectors.
pub fn average_cls(stack: &LayerClsStack) -> Result<TextEmbedding, EmbedError> {
    pool_cls(stack, ClsPooling::LayerMean)
}

pub fn pool_cls(stack: &LayerClsStack, pooling: ClsPooling) -> Result<TextEmbedding, EmbedError> {
    let first = stack.layers.first().ok_or(EmbedError::EmptyStack)?;
    let d = first.len();
    let mut sum = vec![0.0; d];
    for (i, layer) in stack.layers.iter().enumerate() {
        if layer.len() != d {
            return Err(EmbedError::RaggedStack {
                layer: i,
                expected: d,
                got: layer.len(),
            });
        }
        for (s, v) in sum.iter_mut().zip(layer) {
            *s += v;
        }
    }
    let divisor = match pooling {
        ClsPooling::LayerMean => stack.layers.len(),
        ClsPooling::SumOverLayers if stack.layers.len() < 2 => return Err(EmbedError::EmptyStack),
        ClsPooling::SumOverLayers => stack.layers.len() - 1,
    } as f64;
    TextEmbedding::new(
        "cls-average",
        sum.into_iter().map(|s| s / divisor).collect(),
    )
}

/// A pure function from text to an embedding.
pub trait TextEmbedder: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<TextEmbedding, EmbedError>;
}

/// Lowercase hex SHA-256 of the text; the cache key of its embedding.
pub fn content_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Identifier, number and single-punctuation tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(&text[start..i]);
        } else if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            out.push(&text[start..i]);
        } else {
            let len = text[i..].chars().next().map_or(1, char::len_utf8);
            out.push(&text[i..i + len]);
            i += len;
        }
    }
    out
}

fn fnv1a(seed: u64, parts: &[&str]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for (k, p) in parts.iter().enumerate() {
        if k > 0 {
            h ^= 0x1f;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        for &b in p.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Signed feature hashing of unigrams and bigrams, L2-normalised.
#[derive(Debug, Clone)]
pub struct HashedFeaturizer {
    pub dim: usize,
    pub seed: u64,
}

impl HashedFeaturizer {
    pub fn new(dim: usize, seed: u64) -> Result<Self, EmbedError> {
        if dim < 8 {
            return Err(EmbedError::DimTooSmall(dim));
        }
        Ok(Self { dim, seed })
    }
}

/// Free-function form of [`HashedFeaturizer::embed`].
pub fn hashed_featurizer(text: &str, dim: usize, seed: u64) -> Result<TextEmbedding, EmbedError> {
    HashedFeaturizer::new(dim, seed)?.embed(text)
}

impl TextEmbedder for HashedFeaturizer {
    fn id(&self) -> String {
        format!("hashed-d{}-s{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<TextEmbedding, EmbedError> {
        let tokens = tokenize(text);
        let mut v = vec![0.0; self.dim];
        let mut add = |parts: &[&str]| {
            let h = fnv1a(self.seed, parts);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        };
        for t in &tokens {
            add(&[t]);
        }
        for w in tokens.windows(2) {
            add(&[w[0], w[1]]);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        TextEmbedding::new(self.id(), v)
    }
}

/// Content-addressed embedding store.
///
/// Binary file: a sequence of records, each a 64-byte ASCII hex key, a
/// little-endian `u32` dimension, then that many little-endian `f64`s.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingCache {
    entries: BTreeMap<String, Vec<f64>>,
}

fn is_content_key(key: &str) -> bool {
    key.len() == 64 && key.bytes().all(|b| b.is_ascii_hexdigit())
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn put(&mut self, key: impl Into<String>, vector: Vec<f64>) {
        self.entries.insert(key.into(), vector);
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, EmbedError> {
        let mut buf = Vec::new();
        for (key, values) in &self.entries {
            if !is_content_key(key) {
                return Err(EmbedError::BadKey(key.clone()));
            }
            buf.extend_from_slice(key.as_bytes());
            buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedError> {
        let mut entries = BTreeMap::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let key_bytes = bytes
                .get(pos..pos + 64)
                .ok_or_else(|| EmbedError::Corrupt {
                    key: String::from_utf8_lossy(&bytes[pos..]).into_owned(),
                    reason: "truncated key".into(),
                })?;
            let key = String::from_utf8_lossy(key_bytes).into_owned();
            if !is_content_key(&key) {
                return Err(EmbedError::Corrupt {
                    key,
                    reason: "key is not hex".into(),
                });
            }
            pos += 64;
            let corrupt = |reason: &str| EmbedError::Corrupt {
                key: key.clone(),
                reason: reason.into(),
            };
            let dim_bytes = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| corrupt("truncated dimension"))?;
            let dim = u32::from_le_bytes(dim_bytes.try_into().unwrap()) as usize;
            pos += 4;
            let raw = bytes
                .get(pos..pos + dim * 8)
                .ok_or_else(|| corrupt("truncated values"))?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(corrupt("non-finite value"));
            }
            pos += dim * 8;
            entries.insert(key, values);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let bytes = self.to_bytes()?;
        let io = |source| EmbedError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&bytes).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let bytes = std::fs::read(path).map_err(|source| EmbedError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Merges every `*.json` document in `dir`; each maps keys (e.g.
    /// configuration hashes) to vectors.
    pub fn load_dir(dir: &Path) -> Result<Self, EmbedError> {
        let io = |source| EmbedError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut cache = Self::new();
        for f in files {
            let doc: BTreeMap<String, Vec<f64>> = crate::doc::read(&f)?;
            for (k, v) in doc {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(EmbedError::Corrupt {
                        key: k,
                        reason: "non-finite value".into(),
                    });
                }
                cache.put(k, v);
            }
        }
        Ok(cache)
    }
}

/// Looks texts up by [`content_key`] in a cache of precomputed vectors.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbeddings {
    pub cache: EmbeddingCache,
    pub dim: usize,
    pub name: String,
}

impl TextEmbedder for PrecomputedEmbeddings {
    fn id(&self) -> String {
        format!("precomputed-{}", self.name)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<TextEmbedding, EmbedError> {
        let key = content_key(text);
        let v = self.cache.get(&key).ok_or(EmbedError::Missing(key))?;
        TextEmbedding::new(self.id(), v.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_layers_average_to_themselves() {
        let c = vec![0.25, -1.0, 3.5];
        let e = average_cls(&LayerClsStack {
            layers: vec![c.clone(); 4],
        })
        .unwrap();
        assert_eq!(e.vector, c);
    }

    #[test]
    fn two_unit_vectors_average() {
        let e = average_cls(&LayerClsStack {
            layers: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        })
        .unwrap();
        assert_eq!(e.vector, vec![0.5, 0.5]);
    }

    #[test]
    fn empty_and_ragged_stacks() {
        assert!(matches!(
            average_cls(&LayerClsStack { layers: vec![] }),
            Err(EmbedError::EmptyStack)
        ));
        assert!(matches!(
            average_cls(&LayerClsStack {
                layers: vec![vec![1.0], vec![1.0, 2.0]]
            }),
            Err(EmbedError::RaggedStack { layer: 1, .. })
        ));
    }

    #[test]
    fn sum_over_layers_pooling() {
        let e = pool_cls(
            &LayerClsStack {
                layers: vec![vec![1.0], vec![2.0], vec![3.0]],
            },
            ClsPooling::SumOverLayers,
        )
        .unwrap();
        assert_eq!(e.vector, vec![3.0]);
    }

    #[test]
    fn tokenizer_splits_pragmas() {
        assert_eq!(
            tokenize("#pragma HLS UNROLL factor=4"),
            vec!["#", "pragma", "HLS", "UNROLL", "factor", "=", "4"]
        );
    }

    #[test]
    fn empty_text_is_zero() {
        let e = hashed_featurizer("", 16, 0).unwrap();
        assert_eq!(e.vector, vec![0.0; 16]);
    }

    #[test]
    fn featurizer_is_deterministic_and_normalised() {
        let a = hashed_featurizer("for (i = 0; i < n; i++) a[i] += b[i];", 64, 3).unwrap();
        let b = hashed_featurizer("for (i = 0; i < n; i++) a[i] += b[i];", 64, 3).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn featurizer_sees_factor_changes() {
        let base = "L0: for (i = 0; i < 64; i++) {\n#pragma HLS UNROLL factor=2\n}";
        let a = hashed_featurizer(base, DEFAULT_TEXT_DIM, 0).unwrap();
        let b =
            hashed_featurizer(&base.replace("factor=2", "factor=4"), DEFAULT_TEXT_DIM, 0).unwrap();
        assert_ne!(a.vector, b.vector);
    }

    #[test]
    fn dim_floor() {
        assert!(matches!(
            hashed_featurizer("x", 7, 0),
            Err(EmbedError::DimTooSmall(7))
        ));
    }

    #[test]
    fn cache_round_trip_and_absent_key() {
        let mut cache = EmbeddingCache::new();
        let key = content_key("abc");
        cache.put(key.clone(), vec![1.0, -0.5, f64::MIN_POSITIVE]);
        let back = EmbeddingCache::from_bytes(&cache.to_bytes().unwrap()).unwrap();
        assert_eq!(back.get(&key), cache.get(&key));
        assert!(back.get(&content_key("zzz")).is_none());
    }

    #[test]
    fn corrupt_entry_names_key() {
        let mut cache = EmbeddingCache::new();
        let key = content_key("abc");
        cache.put(key.clone(), vec![1.0; 4]);
        let bytes = cache.to_bytes().unwrap();
        let err = EmbeddingCache::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        match err {
            EmbedError::Corrupt { key: k, .. } => assert_eq!(k, key),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn binary_cache_rejects_non_hash_keys() {
        let mut cache = EmbeddingCache::new();
        cache.put("cfg-01", vec![0.0]);
        assert!(matches!(cache.to_bytes(), Err(EmbedError::BadKey(_))));
    }

    #[test]
    fn directory_of_documents() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.json"), r#"{"c1":[1.0,2.0]}"#).unwrap();
        std::fs::write(dir.path().join("b.json"), r#"{"c2":[3.0,4.0]}"#).unwrap();
        let cache = EmbeddingCache::load_dir(dir.path()).unwrap();
        assert_eq!(cache.get("c2"), Some(&[3.0, 4.0][..]));
        assert_eq!(cache.len(), 2);
    }
}
