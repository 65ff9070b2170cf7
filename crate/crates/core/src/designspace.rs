//! Pragma directives, design spaces and configurations.
//!
//! A configuration stores one value index per directive, aligned with the
//! directive order of its [`DesignSpace`]. Configuration and space files name
//! values (`"off"`, `"flatten"`, `4`) rather than indices.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpaceError {
    #[error("directive `{0}` has an empty domain")]
    EmptyDomain(String),
    #[error("directive `{name}` lists value {value} twice")]
    DuplicateValue { name: String, value: PragmaValue },
    #[error("directive `{0}` domain is not in ascending order")]
    UnorderedDomain(String),
    #[error("directive `{name}` of kind {kind} cannot take value {value}")]
    ValueForKind {
        name: String,
        kind: PragmaKind,
        value: PragmaValue,
    },
    #[error("duplicate directive name `{0}`")]
    DuplicateDirective(String),
    #[error("design space has no directives")]
    EmptySpace,
    #[error("unknown directive `{0}`")]
    UnknownDirective(String),
    #[error("value {value} is outside the domain of `{name}`")]
    OutOfDomain { name: String, value: PragmaValue },
    #[error("configuration does not assign directive `{0}`")]
    Unassigned(String),
    #[error("configuration has {got} entries, space has {expected} directives")]
    Arity { expected: usize, got: usize },
    #[error("requested {requested} distinct configurations from a space of {size}")]
    TooManySamples { requested: u128, size: u128 },
    #[error("template slot `{0}` has no assignment")]
    UnassignedSlot(String),
    #[error("template has no slot for directive `{0}`")]
    MissingSlot(String),
    #[error("template has more than one slot for `{0}`")]
    RepeatedSlot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PragmaKind {
    Pipeline,
    Unroll,
    ArrayPartition,
    Tile,
}

impl PragmaKind {
    pub const ALL: [PragmaKind; 4] = [
        PragmaKind::Pipeline,
        PragmaKind::Unroll,
        PragmaKind::ArrayPartition,
        PragmaKind::Tile,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PragmaKind::Pipeline => "pipeline",
            PragmaKind::Unroll => "unroll",
            PragmaKind::ArrayPartition => "array_partition",
            PragmaKind::Tile => "tile",
        }
    }
}

impl fmt::Display for PragmaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A pragma value. Pipelines take `off`/`on`/`flatten`; every other kind
/// takes a positive factor where 1 means disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PragmaValue {
    Off,
    On,
    Flatten,
    Factor(u32),
}

impl PragmaValue {
    /// Renders as an absent pragma.
    pub fn is_disabled(self) -> bool {
        matches!(self, PragmaValue::Off | PragmaValue::Factor(1))
    }

    pub fn factor(self) -> u32 {
        match self {
            PragmaValue::Factor(f) => f,
            _ => 1,
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text.trim() {
            "off" => Some(PragmaValue::Off),
            "on" => Some(PragmaValue::On),
            "flatten" => Some(PragmaValue::Flatten),
            t => t
                .parse::<u32>()
                .ok()
                .filter(|&f| f > 0)
                .map(PragmaValue::Factor),
        }
    }

    fn allowed_for(self, kind: PragmaKind) -> bool {
        match (kind, self) {
            (PragmaKind::Pipeline, PragmaValue::Factor(_)) => false,
            (PragmaKind::Pipeline, _) => true,
            (_, PragmaValue::Factor(f)) => f > 0,
            _ => false,
        }
    }
}

impl fmt::Display for PragmaValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PragmaValue::Off => f.write_str("off"),
            PragmaValue::On => f.write_str("on"),
            PragmaValue::Flatten => f.write_str("flatten"),
            PragmaValue::Factor(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for PragmaValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PragmaValue::Factor(n) => s.serialize_u32(*n),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for PragmaValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Text(String),
        }
        let raw = Raw::deserialize(d)?;
        let parsed = match &raw {
            Raw::Num(0) => None,
            Raw::Num(n) => Some(PragmaValue::Factor(*n)),
            Raw::Text(t) => PragmaValue::parse(t),
        };
        parsed.ok_or_else(|| {
            serde::de::Error::custom("expected \"off\", \"on\", \"flatten\" or a positive integer")
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PragmaDirective {
    pub name: String,
    pub kind: PragmaKind,
    /// Loop id, or array name for `array_partition`.
    pub target: String,
    pub domain: Vec<PragmaValue>,
}

impl PragmaDirective {
    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.domain.is_empty() {
            return Err(SpaceError::EmptyDomain(self.name.clone()));
        }
        let mut seen = HashSet::new();
        for &v in &self.domain {
            if !v.allowed_for(self.kind) {
                return Err(SpaceError::ValueForKind {
                    name: self.name.clone(),
                    kind: self.kind,
                    value: v,
                });
            }
            if !seen.insert(v) {
                return Err(SpaceError::DuplicateValue {
                    name: self.name.clone(),
                    value: v,
                });
            }
        }
        if self.domain.windows(2).any(|w| w[0] > w[1]) {
            return Err(SpaceError::UnorderedDomain(self.name.clone()));
        }
        Ok(())
    }

    pub fn value_index(&self, value: PragmaValue) -> Option<usize> {
        self.domain.iter().position(|&v| v == value)
    }

    /// Canonical pragma line, or `None` when the value is disabled.
    pub fn render(&self, value: PragmaValue) -> Option<String> {
        if value.is_disabled() {
            return None;
        }
        Some(match (self.kind, value) {
            (PragmaKind::Pipeline, PragmaValue::Flatten) => {
                "#pragma HLS PIPELINE flatten".to_string()
            }
            (PragmaKind::Pipeline, _) => "#pragma HLS PIPELINE".to_string(),
            (PragmaKind::Unroll, v) => format!("#pragma HLS UNROLL factor={}", v.factor()),
            (PragmaKind::ArrayPartition, v) => format!(
                "#pragma HLS ARRAY_PARTITION variable={} cyclic factor={}",
                self.target,
                v.factor()
            ),
            (PragmaKind::Tile, v) => format!("#pragma HLS TILE factor={}", v.factor()),
        })
    }
}

/// One value index per directive, in the space's directive order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DesignConfiguration {
    indices: Vec<usize>,
}

impl DesignConfiguration {
    pub fn from_indices(indices: Vec<usize>) -> Self {
        Self { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.indices
            .iter()
            .zip(&other.indices)
            .filter(|(a, b)| a != b)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpace {
    pub directives: Vec<PragmaDirective>,
}

impl DesignSpace {
    pub fn new(directives: Vec<PragmaDirective>) -> Result<Self, SpaceError> {
        let space = Self { directives };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.directives.is_empty() {
            return Err(SpaceError::EmptySpace);
        }
        let mut names = HashSet::new();
        for d in &self.directives {
            d.validate()?;
            if !names.insert(d.name.as_str()) {
                return Err(SpaceError::DuplicateDirective(d.name.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.directives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directives.is_empty()
    }

    /// Number of configurations, the product of the domain sizes.
    pub fn size(&self) -> u128 {
        self.directives
            .iter()
            .map(|d| d.domain.len() as u128)
            .product()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.directives.iter().position(|d| d.name == name)
    }

    pub fn directive(&self, name: &str) -> Option<&PragmaDirective> {
        self.directives.iter().find(|d| d.name == name)
    }

    pub fn value(&self, cfg: &DesignConfiguration, directive: usize) -> PragmaValue {
        self.directives[directive].domain[cfg.indices[directive]]
    }

    /// `(directive, value)` pairs of a configuration.
    pub fn values<'a>(
        &'a self,
        cfg: &'a DesignConfiguration,
    ) -> impl Iterator<Item = (&'a PragmaDirective, PragmaValue)> + 'a {
        self.directives
            .iter()
            .zip(&cfg.indices)
            .map(|(d, &i)| (d, d.domain[i]))
    }

    pub fn check(&self, cfg: &DesignConfiguration) -> Result<(), SpaceError> {
        if cfg.indices.len() != self.directives.len() {
            return Err(SpaceError::Arity {
                expected: self.directives.len(),
                got: cfg.indices.len(),
            });
        }
        for (d, &i) in self.directives.iter().zip(&cfg.indices) {
            if i >= d.domain.len() {
                return Err(SpaceError::OutOfDomain {
                    name: d.name.clone(),
                    value: PragmaValue::Factor(i as u32),
                });
            }
        }
        Ok(())
    }

    /// Configuration at a lexicographic position (last directive fastest).
    pub fn config_at(&self, mut index: u128) -> DesignConfiguration {
        let mut indices = vec![0; self.directives.len()];
        for (slot, d) in indices.iter_mut().zip(&self.directives).rev() {
            let n = d.domain.len() as u128;
            *slot = (index % n) as usize;
            index /= n;
        }
        DesignConfiguration { indices }
    }

    pub fn index_of(&self, cfg: &DesignConfiguration) -> u128 {
        self.directives
            .iter()
            .zip(&cfg.indices)
            .fold(0u128, |acc, (d, &i)| {
                acc * d.domain.len() as u128 + i as u128
            })
    }

    /// Lexicographic stream of at most `limit` configurations.
    pub fn enumerate(&self, limit: u128) -> impl Iterator<Item = DesignConfiguration> + '_ {
        (0..limit.min(self.size())).map(move |i| self.config_at(i))
    }

    /// `k` independent uniform draws (repeats possible).
    pub fn sample_random(&self, seed: u64, k: usize) -> Vec<DesignConfiguration> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k).map(|_| self.random_config(&mut rng)).collect()
    }

    pub fn random_config<R: Rng>(&self, rng: &mut R) -> DesignConfiguration {
        DesignConfiguration {
            indices: self
                .directives
                .iter()
                .map(|d| rng.gen_range(0..d.domain.len()))
                .collect(),
        }
    }

    /// `k` distinct configurations, uniformly without replacement.
    pub fn sample_distinct(
        &self,
        seed: u64,
        k: usize,
    ) -> Result<Vec<DesignConfiguration>, SpaceError> {
        let size = self.size();
        if k as u128 > size {
            return Err(SpaceError::TooManySamples {
                requested: k as u128,
                size,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if size <= usize::MAX as u128 / 2 {
            return Ok(sample(&mut rng, size as usize, k)
                .into_iter()
                .map(|i| self.config_at(i as u128))
                .collect());
        }
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let c = self.random_config(&mut rng);
            if seen.insert(c.clone()) {
                out.push(c);
            }
        }
        Ok(out)
    }

    /// A configuration differing from `cfg` in exactly one directive, uniform
    /// over all single-coordinate changes. Returns `cfg` unchanged when every
    /// domain is a singleton.
    pub fn neighbor<R: Rng>(&self, cfg: &DesignConfiguration, rng: &mut R) -> DesignConfiguration {
        let moves: usize = self.directives.iter().map(|d| d.domain.len() - 1).sum();
        if moves == 0 {
            return cfg.clone();
        }
        let mut pick = rng.gen_range(0..moves);
        let mut out = cfg.clone();
        for (i, d) in self.directives.iter().enumerate() {
            let n = d.domain.len() - 1;
            if pick < n {
                // skip over the current value
                out.indices[i] = if pick >= cfg.indices[i] {
                    pick + 1
                } else {
                    pick
                };
                break;
            }
            pick -= n;
        }
        out
    }

    pub fn neighbor_seeded(&self, cfg: &DesignConfiguration, seed: u64) -> DesignConfiguration {
        self.neighbor(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Builds a configuration from named values; every directive must appear.
    pub fn config_from_values(
        &self,
        values: &BTreeMap<String, PragmaValue>,
    ) -> Result<DesignConfiguration, SpaceError> {
        for name in values.keys() {
            if self.position(name).is_none() {
                return Err(SpaceError::UnknownDirective(name.clone()));
            }
        }
        let indices = self
            .directives
            .iter()
            .map(|d| {
                let v = *values
                    .get(&d.name)
                    .ok_or_else(|| SpaceError::Unassigned(d.name.clone()))?;
                d.value_index(v).ok_or_else(|| SpaceError::OutOfDomain {
                    name: d.name.clone(),
                    value: v,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(DesignConfiguration { indices })
    }

    pub fn values_map(&self, cfg: &DesignConfiguration) -> BTreeMap<String, PragmaValue> {
        self.values(cfg).map(|(d, v)| (d.name.clone(), v)).collect()
    }

    /// `name=value` pairs joined by commas, in directive order.
    pub fn config_key(&self, cfg: &DesignConfiguration) -> String {
        self.values(cfg)
            .map(|(d, v)| format!("{}={}", d.name, v))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Short stable identifier of a configuration.
    pub fn config_hash(&self, cfg: &DesignConfiguration) -> String {
        let digest = Sha256::digest(self.config_key(cfg).as_bytes());
        hex::encode(&digest[..8])
    }

    /// Directives whose value renders as a pragma.
    pub fn active_directives(&self, cfg: &DesignConfiguration) -> usize {
        self.values(cfg).filter(|(_, v)| !v.is_disabled()).count()
    }
}

/// On-disk form of a configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub kernel_id: String,
    pub assignment: BTreeMap<String, PragmaValue>,
}

impl ConfigDocument {
    pub fn new(kernel_id: &str, space: &DesignSpace, cfg: &DesignConfiguration) -> Self {
        Self {
            kernel_id: kernel_id.to_string(),
            assignment: space.values_map(cfg),
        }
    }
}

pub const SLOT_OPEN: &str = "__PRAGMA(";
pub const SLOT_CLOSE: &str = ")__";

/// Kernel source text with `__PRAGMA(name)__` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehavioralDescription {
    pub kernel_id: String,
    pub source_template: String,
}

/// Slot names in order of appearance.
pub fn template_slots(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find(SLOT_OPEN) {
        let after = &rest[start + SLOT_OPEN.len()..];
        match after.find(SLOT_CLOSE) {
            Some(end) => {
                out.push(after[..end].to_string());
                rest = &after[end + SLOT_CLOSE.len()..];
            }
            None => break,
        }
    }
    out
}

impl BehavioralDescription {
    pub fn slots(&self) -> Vec<String> {
        template_slots(&self.source_template)
    }

    /// Checks the one-slot-per-directive invariant against a space.
    pub fn validate(&self, space: &DesignSpace) -> Result<(), SpaceError> {
        let slots = self.slots();
        let mut seen = HashSet::new();
        for s in &slots {
            if space.position(s).is_none() {
                return Err(SpaceError::UnassignedSlot(s.clone()));
            }
            if !seen.insert(s.as_str()) {
                return Err(SpaceError::RepeatedSlot(s.clone()));
            }
        }
        for d in &space.directives {
            if !seen.contains(d.name.as_str()) {
                return Err(SpaceError::MissingSlot(d.name.clone()));
            }
        }
        Ok(())
    }
}

/// Replaces every slot with its canonical pragma line (or nothing when the
/// directive is disabled).
pub fn merge(
    cfg: &DesignConfiguration,
    space: &DesignSpace,
    desc: &BehavioralDescription,
) -> Result<String, SpaceError> {
    space.check(cfg)?;
    let template = &desc.source_template;
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template.as_str();
    while let Some(start) = rest.find(SLOT_OPEN) {
        let after = &rest[start + SLOT_OPEN.len()..];
        let Some(end) = after.find(SLOT_CLOSE) else {
            break;
        };
        let name = &after[..end];
        let pos = space
            .position(name)
            .ok_or_else(|| SpaceError::UnassignedSlot(name.to_string()))?;
        out.push_str(&rest[..start]);
        let d = &space.directives[pos];
        if let Some(line) = d.render(space.value(cfg, pos)) {
            out.push_str(&line);
        }
        rest = &after[end + SLOT_CLOSE.len()..];
    }
    out.push_str(rest);
    Ok(out)
}
