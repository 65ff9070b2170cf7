//! Synthetic QoR model.
//!
//! Latency is computed bottom-up over the loop tree. For a loop with trip
//! count `T`, unroll `u` (capped at `T`), body depth `D`, summed child
//! latency `C`, loads per iteration `L` and effective memory ports
//! `P = ports · partition · tile`:
//!
//! ```text
//! it   = T / u                     mem = L·u / P
//! off:     it · (max(D, mem) + C + 1)
//! on:      (it − 1) · max(1, mem, C) + D + C + 1
//! flatten: (it − 1) · max(1, mem, C) + D + C      children forced to ≥ on
//! ```
//!
//! Root loops run in sequence; the sum is rounded up. Resources are the
//! model's base values plus terms that vanish at the identity
//! configuration (unroll 1, pipeline off, partition 1, tile 1):
//!
//! ```text
//! lut/ff += (u − 1)·body + level·u·body + (t − 1)·tile      per loop
//! dsp    += (u − 1)·muls·dsp_per_mul                          per loop
//! bram   += (t − 1)·tile_bram per loop, (f − 1)·partition_bram per array
//! ```
//!
//! where `level` is 0, `pipeline_on` or `pipeline_flatten`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdfg::{build_cdfg, insert_pragma_nodes, CdfgError, KernelDescription, OpCounts};
use crate::dataset::{Dataset, GraphTextSample, TargetNormalizer};
use crate::designspace::{
    merge, BehavioralDescription, DesignConfiguration, DesignSpace, PragmaKind, PragmaValue,
    SpaceError,
};
use crate::doc::DocError;
use crate::textembed::{EmbedError, TextEmbedder};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle model: {0}")]
    Model(String),
    #[error("directive `{directive}` targets `{target}`, which the oracle model does not know")]
    UnknownTarget { directive: String, target: String },
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Graph(#[from] CdfgError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Doc(#[from] DocError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resources {
    pub lut: u64,
    pub dsp: u64,
    pub ff: u64,
    pub bram: u64,
}

impl Resources {
    pub fn as_array(&self) -> [u64; 4] {
        [self.lut, self.dsp, self.ff, self.bram]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpCost {
    pub latency: f64,
    pub lut: f64,
    pub dsp: f64,
    pub ff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Coefficients {
    pub load: OpCost,
    pub mul: OpCost,
    pub add: OpCost,
    pub store: OpCost,
    pub pipeline_on: f64,
    pub pipeline_flatten: f64,
    pub tile_lut: f64,
    pub tile_ff: f64,
    pub tile_bram: f64,
    pub partition_lut: f64,
    pub partition_ff: f64,
    pub partition_bram: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        let c = |latency, lut, dsp, ff| OpCost {
            latency,
            lut,
            dsp,
            ff,
        };
        Self {
            load: c(2.0, 10.0, 0.0, 20.0),
            mul: c(3.0, 8.0, 3.0, 64.0),
            add: c(1.0, 32.0, 0.0, 32.0),
            store: c(1.0, 10.0, 0.0, 10.0),
            pipeline_on: 0.5,
            pipeline_flatten: 1.0,
            tile_lut: 40.0,
            tile_ff: 60.0,
            tile_bram: 1.0,
            partition_lut: 24.0,
            partition_ff: 16.0,
            partition_bram: 1.0,
        }
    }
}

fn default_ports() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleLoop {
    pub id: String,
    pub trip: u64,
    pub ops: OpCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default = "default_ports")]
    pub ports: u32,
    /// Array whose partitioning widens this loop's memory ports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub array: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleKernelModel {
    pub loops: Vec<OracleLoop>,
    #[serde(default)]
    pub arrays: Vec<String>,
    pub base: Resources,
    pub capacities: Resources,
    #[serde(default)]
    pub coefficients: Coefficients,
}

impl OracleKernelModel {
    pub fn validate(&self) -> Result<(), OracleError> {
        let bad = |m: String| Err(OracleError::Model(m));
        if self.loops.is_empty() {
            return bad("no loops".into());
        }
        let ids: HashMap<&str, &OracleLoop> =
            self.loops.iter().map(|l| (l.id.as_str(), l)).collect();
        if ids.len() != self.loops.len() {
            return bad("duplicate loop id".into());
        }
        for l in &self.loops {
            if l.trip == 0 {
                return bad(format!("loop `{}` has zero trip count", l.id));
            }
            if l.ports == 0 {
                return bad(format!("loop `{}` has zero memory ports", l.id));
            }
            if let Some(p) = &l.parent {
                if !ids.contains_key(p.as_str()) {
                    return bad(format!("loop `{}` has unknown parent `{p}`", l.id));
                }
                let mut cur = p.as_str();
                let mut steps = 0;
                while let Some(next) = ids[cur].parent.as_deref() {
                    steps += 1;
                    if next == l.id || steps > self.loops.len() {
                        return bad(format!("loop `{}` is nested in itself", l.id));
                    }
                    cur = next;
                }
            }
            if let Some(a) = &l.array {
                if !self.arrays.contains(a) {
                    return bad(format!("loop `{}` reads unknown array `{a}`", l.id));
                }
            }
        }
        for (name, base, cap) in [
            ("lut", self.base.lut, self.capacities.lut),
            ("dsp", self.base.dsp, self.capacities.dsp),
            ("ff", self.base.ff, self.capacities.ff),
            ("bram", self.base.bram, self.capacities.bram),
        ] {
            if cap <= base {
                return bad(format!(
                    "{name} capacity {cap} does not exceed base usage {base}"
                ));
            }
        }
        Ok(())
    }

    /// Derives the oracle view of a kernel description. Each loop reads the
    /// first array that lists it in `accessed_by`.
    pub fn from_description(
        desc: &KernelDescription,
        base: Resources,
        capacities: Resources,
    ) -> Self {
        let loops = desc
            .loops
            .iter()
            .map(|l| OracleLoop {
                id: l.id.clone(),
                trip: l.trip_count,
                ops: l.ops,
                parent: l.parent.clone(),
                ports: default_ports(),
                array: desc
                    .arrays
                    .iter()
                    .find(|a| a.accessed_by.contains(&l.id))
                    .map(|a| a.name.clone()),
            })
            .collect();
        Self {
            loops,
            arrays: desc.arrays.iter().map(|a| a.name.clone()).collect(),
            base,
            capacities,
            coefficients: Coefficients::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QorMetrics {
    pub latency_cycles: u64,
    pub lut: u64,
    pub dsp: u64,
    pub ff: u64,
    pub bram: u64,
    pub feasible: bool,
}

impl QorMetrics {
    pub fn resources(&self) -> Resources {
        Resources {
            lut: self.lut,
            dsp: self.dsp,
            ff: self.ff,
            bram: self.bram,
        }
    }

    /// Largest fraction of any platform capacity in use.
    pub fn max_utilization(&self, capacities: &Resources) -> f64 {
        self.resources()
            .as_array()
            .iter()
            .zip(capacities.as_array())
            .map(|(&v, c)| v as f64 / c as f64)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct LoopKnobs {
    pipeline: Option<usize>,
    unroll: Option<usize>,
    tile: Option<usize>,
}

/// A model bound to a design space, ready to evaluate configurations.
#[derive(Debug, Clone)]
pub struct Oracle {
    model: OracleKernelModel,
    space: DesignSpace,
    knobs: Vec<LoopKnobs>,
    children: Vec<Vec<usize>>,
    roots: Vec<usize>,
    loop_array: Vec<Option<usize>>,
    partition: Vec<Option<usize>>,
}

fn level(v: PragmaValue) -> u8 {
    match v {
        PragmaValue::On => 1,
        PragmaValue::Flatten => 2,
        _ => 0,
    }
}

impl Oracle {
    pub fn new(model: OracleKernelModel, space: DesignSpace) -> Result<Self, OracleError> {
        model.validate()?;
        space.validate()?;
        let loop_pos: HashMap<&str, usize> = model
            .loops
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.as_str(), i))
            .collect();
        let array_pos: HashMap<&str, usize> = model
            .arrays
            .iter()
            .enumerate()
            .map(|(i, a)| (a.as_str(), i))
            .collect();
        let mut knobs = vec![LoopKnobs::default(); model.loops.len()];
        let mut partition = vec![None; model.arrays.len()];
        for (i, d) in space.directives.iter().enumerate() {
            let unknown = || OracleError::UnknownTarget {
                directive: d.name.clone(),
                target: d.target.clone(),
            };
            let slot = if d.kind == PragmaKind::ArrayPartition {
                &mut partition[*array_pos.get(d.target.as_str()).ok_or_else(unknown)?]
            } else {
                let k = &mut knobs[*loop_pos.get(d.target.as_str()).ok_or_else(unknown)?];
                match d.kind {
                    PragmaKind::Pipeline => &mut k.pipeline,
                    PragmaKind::Unroll => &mut k.unroll,
                    _ => &mut k.tile,
                }
            };
            if slot.is_some() {
                return Err(OracleError::Model(format!(
                    "more than one {} directive on `{}`",
                    d.kind, d.target
                )));
            }
            *slot = Some(i);
        }
        let mut children = vec![Vec::new(); model.loops.len()];
        let mut roots = Vec::new();
        for (i, l) in model.loops.iter().enumerate() {
            match &l.parent {
                Some(p) => children[loop_pos[p.as_str()]].push(i),
                None => roots.push(i),
            }
        }
        let loop_array = model
            .loops
            .iter()
            .map(|l| l.array.as_deref().map(|a| array_pos[a]))
            .collect();
        Ok(Self {
            model,
            space,
            knobs,
            children,
            roots,
            loop_array,
            partition,
        })
    }

    pub fn model(&self) -> &OracleKernelModel {
        &self.model
    }

    pub fn space(&self) -> &DesignSpace {
        &self.space
    }

    fn value(&self, cfg: &DesignConfiguration, directive: Option<usize>) -> PragmaValue {
        directive.map_or(PragmaValue::Off, |d| self.space.value(cfg, d))
    }

    fn body_depth(&self, ops: &OpCounts) -> f64 {
        let c = &self.model.coefficients;
        let mut d = 0.0;
        for (n, cost) in [
            (ops.load, &c.load),
            (ops.mul, &c.mul),
            (ops.add, &c.add),
            (ops.store, &c.store),
        ] {
            if n > 0 {
                d += cost.latency;
            }
        }
        d.max(1.0)
    }

    fn body_cost(&self, ops: &OpCounts) -> (f64, f64) {
        let c = &self.model.coefficients;
        let mut lut = 0.0;
        let mut ff = 0.0;
        for (n, cost) in [
            (ops.load, &c.load),
            (ops.mul, &c.mul),
            (ops.add, &c.add),
            (ops.store, &c.store),
        ] {
            lut += n as f64 * cost.lut;
            ff += n as f64 * cost.ff;
        }
        (lut, ff)
    }

    fn loop_latency(
        &self,
        i: usize,
        cfg: &DesignConfiguration,
        forced_on: bool,
        extra: &mut [f64; 4],
    ) -> f64 {
        let l = &self.model.loops[i];
        let k = self.knobs[i];
        let mut lvl = level(self.value(cfg, k.pipeline));
        if forced_on {
            lvl = lvl.max(1);
        }
        let t = l.trip as f64;
        let u = (self.value(cfg, k.unroll).factor() as f64).min(t);
        let tile = self.value(cfg, k.tile).factor() as f64;
        let part =
            self.loop_array[i].map_or(1.0, |a| self.value(cfg, self.partition[a]).factor() as f64);

        let inner: f64 = self.children[i]
            .iter()
            .map(|&c| self.loop_latency(c, cfg, lvl == 2 || forced_on, extra))
            .sum();

        let d = self.body_depth(&l.ops);
        let it = t / u;
        let mem = l.ops.load as f64 * u / (l.ports as f64 * part * tile);
        let latency = match lvl {
            0 => it * (d.max(mem) + inner + 1.0),
            1 => (it - 1.0) * mem.max(1.0).max(inner) + d + inner + 1.0,
            _ => (it - 1.0) * mem.max(1.0).max(inner) + d + inner,
        };

        let c = &self.model.coefficients;
        let (body_lut, body_ff) = self.body_cost(&l.ops);
        let frac = match lvl {
            0 => 0.0,
            1 => c.pipeline_on,
            _ => c.pipeline_flatten,
        };
        extra[0] += (u - 1.0) * body_lut + frac * u * body_lut + (tile - 1.0) * c.tile_lut;
        extra[1] += (u - 1.0) * l.ops.mul as f64 * c.mul.dsp;
        extra[2] += (u - 1.0) * body_ff + frac * u * body_ff + (tile - 1.0) * c.tile_ff;
        extra[3] += (tile - 1.0) * c.tile_bram;
        latency
    }

    /// Closed-form QoR of a configuration. Pure.
    pub fn evaluate(&self, cfg: &DesignConfiguration) -> Result<QorMetrics, OracleError> {
        self.space.check(cfg)?;
        Ok(self.evaluate_unchecked(cfg))
    }

    pub(crate) fn evaluate_unchecked(&self, cfg: &DesignConfiguration) -> QorMetrics {
        let mut extra = [0.0f64; 4];
        let latency: f64 = self
            .roots
            .iter()
            .map(|&r| self.loop_latency(r, cfg, false, &mut extra))
            .sum();
        let c = &self.model.coefficients;
        for p in self.partition.iter() {
            let f = self.value(cfg, *p).factor() as f64;
            extra[0] += (f - 1.0) * c.partition_lut;
            extra[2] += (f - 1.0) * c.partition_ff;
            extra[3] += (f - 1.0) * c.partition_bram;
        }
        let b = &self.model.base;
        // tolerate accumulated rounding so integral results stay integral
        let up = |x: f64| (x - 1e-9).ceil().max(0.0) as u64;
        let metrics = QorMetrics {
            latency_cycles: up(latency).max(1),
            lut: b.lut + up(extra[0]),
            dsp: b.dsp + up(extra[1]),
            ff: b.ff + up(extra[2]),
            bram: b.bram + up(extra[3]),
            feasible: true,
        };
        let cap = &self.model.capacities;
        QorMetrics {
            feasible: metrics.lut <= cap.lut
                && metrics.dsp <= cap.dsp
                && metrics.ff <= cap.ff
                && metrics.bram <= cap.bram,
            ..metrics
        }
    }
}

/// One-shot form of [`Oracle::evaluate`].
pub fn evaluate(
    model: &OracleKernelModel,
    space: &DesignSpace,
    cfg: &DesignConfiguration,
) -> Result<QorMetrics, OracleError> {
    Oracle::new(model.clone(), space.clone())?.evaluate(cfg)
}

/// Everything known about one kernel: source, space and QoR model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub description: KernelDescription,
    pub space: DesignSpace,
    pub oracle: OracleKernelModel,
}

impl KernelSpec {
    pub fn kernel_id(&self) -> &str {
        &self.description.kernel_id
    }

    pub fn behavioral(&self) -> BehavioralDescription {
        BehavioralDescription {
            kernel_id: self.description.kernel_id.clone(),
            source_template: self.description.source_template.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        self.description.validate()?;
        self.space.validate()?;
        self.behavioral().validate(&self.space)?;
        Oracle::new(self.oracle.clone(), self.space.clone())?;
        Ok(())
    }

    pub fn oracle(&self) -> Result<Oracle, OracleError> {
        Oracle::new(self.oracle.clone(), self.space.clone())
    }

    pub fn read(path: &std::path::Path) -> Result<Self, OracleError> {
        let spec: Self = crate::doc::read(path)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Builds one sample without normalised targets.
pub fn make_sample(
    spec: &KernelSpec,
    oracle: &Oracle,
    graph: &crate::cdfg::KernelGraph,
    cfg: &DesignConfiguration,
    embedder: &dyn TextEmbedder,
) -> Result<GraphTextSample, OracleError> {
    let text = merge(cfg, &spec.space, &spec.behavioral())?;
    let embedding = embedder.embed(&text)?;
    Ok(GraphTextSample {
        kernel_id: spec.kernel_id().to_string(),
        config_hash: spec.space.config_hash(cfg),
        config: cfg.indices().to_vec(),
        graph: insert_pragma_nodes(graph, &spec.space, cfg)?,
        text_embedding: embedding.vector,
        metrics: oracle.evaluate(cfg)?,
        targets: [0.0; 5],
    })
}

/// `n` distinct seeded configurations rendered to graph/text samples with
/// oracle targets. Without a normaliser, latency is scaled by the largest
/// latency in the sample and resources by the model's capacities.
pub fn gen_dataset(
    spec: &KernelSpec,
    n: usize,
    seed: u64,
    embedder: &dyn TextEmbedder,
    normalizer: Option<&TargetNormalizer>,
) -> Result<Dataset, OracleError> {
    let oracle = spec.oracle()?;
    let graph = build_cdfg(&spec.description)?;
    let configs = if n as u128 == spec.space.size() {
        spec.space.enumerate(spec.space.size()).collect()
    } else {
        spec.space.sample_distinct(seed, n)?
    };
    let samples = configs
        .iter()
        .map(|cfg| make_sample(spec, &oracle, &graph, cfg, embedder))
        .collect::<Result<Vec<_>, _>>()?;
    let normalizer = match normalizer {
        Some(n) => n.clone(),
        None => TargetNormalizer {
            capacities: spec.oracle.capacities,
            c_max: samples
                .iter()
                .map(|s| s.metrics.latency_cycles)
                .max()
                .unwrap_or(1),
        },
    };
    let mut ds = Dataset {
        normalizer,
        samples,
    };
    ds.renormalize();
    Ok(ds)
}

/// Per-config lookup table used by exhaustive reference computations.
pub fn evaluate_all(
    oracle: &Oracle,
    limit: u128,
) -> Result<BTreeMap<u128, QorMetrics>, OracleError> {
    let size = oracle.space.size();
    if size > limit {
        return Err(OracleError::Model(format!(
            "space of {size} configurations exceeds the exhaustive limit {limit}"
        )));
    }
    Ok((0..size)
        .map(|i| (i, oracle.evaluate_unchecked(&oracle.space.config_at(i))))
        .collect())
}
