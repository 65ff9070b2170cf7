//! Control/data-flow graphs of pragma-annotated kernels.
//!
//! Graphs are built from a [`KernelDescription`]: one block node per loop,
//! one instruction node per body operation, one variable node per array.
//! Node order is blocks (sorted by loop id), then instructions (same loop
//! order, body operations as load, mul, add, store), then arrays.
//!
//! Edge flows use ProGraML numbering on disk: 0 control, 1 data, 2 call,
//! plus 3 for the pragma edges added by [`insert_pragma_nodes`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::designspace::{template_slots, DesignConfiguration, DesignSpace, PragmaKind};
use crate::doc::{self, DocError};
use crate::tensor::Tensor;

pub const NODE_TYPES: [&str; 4] = ["instruction", "block", "pragma", "variable"];
pub const INSTRUCTION_TYPES: [&str; 9] = [
    "none",
    "load",
    "store",
    "add",
    "mul",
    "pipeline",
    "unroll",
    "array_partition",
    "tile",
];
pub const FUNCTION_TYPES: [&str; 2] = ["kernel", "external"];
/// Block type is the loop nesting depth, capped at the last bucket.
pub const BLOCK_TYPES: usize = 4;
pub const DEFAULT_VOCAB: [u32; 4] = [
    NODE_TYPES.len() as u32,
    INSTRUCTION_TYPES.len() as u32,
    FUNCTION_TYPES.len() as u32,
    BLOCK_TYPES as u32,
];

const NT_INSTRUCTION: u32 = 0;
const NT_BLOCK: u32 = 1;
const NT_PRAGMA: u32 = 2;
const NT_VARIABLE: u32 = 3;

#[derive(Debug, Error)]
pub enum CdfgError {
    #[error("invalid kernel description: {}", join_issues(.0))]
    Description(Vec<DescriptionIssue>),
    #[error("directive `{directive}` targets `{target}`, which is not a node of the graph")]
    UnknownTarget { directive: String, target: String },
    #[error("node {node}: {field} index {value} is outside vocabulary of size {vocab}")]
    Feature {
        node: usize,
        field: &'static str,
        value: u32,
        vocab: u32,
    },
    #[error("invalid graph at `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Space(#[from] crate::designspace::SpaceError),
    #[error(transparent)]
    Doc(#[from] DocError),
}

fn join_issues(issues: &[DescriptionIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// One problem found while validating a kernel description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DescriptionIssue {
    NoLoops,
    DuplicateLoop(String),
    DuplicateArray(String),
    ZeroTrip(String),
    UnknownParent { loop_id: String, parent: String },
    CyclicNesting(Vec<String>),
    DanglingSlot(String),
    BadLink { loop_id: String, link: [usize; 2] },
    UnknownAccess { array: String, loop_id: String },
}

impl fmt::Display for DescriptionIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoLoops => write!(f, "no loops"),
            Self::DuplicateLoop(id) => write!(f, "duplicate loop id `{id}`"),
            Self::DuplicateArray(n) => write!(f, "duplicate array `{n}`"),
            Self::ZeroTrip(id) => write!(f, "loop `{id}` has trip count 0"),
            Self::UnknownParent { loop_id, parent } => {
                write!(f, "loop `{loop_id}` names unknown parent `{parent}`")
            }
            Self::CyclicNesting(ids) => write!(f, "cyclic loop nesting among [{}]", ids.join(", ")),
            Self::DanglingSlot(s) => write!(f, "pragma slot `{s}` names no loop or array"),
            Self::BadLink { loop_id, link } => {
                write!(
                    f,
                    "loop `{loop_id}` data link {link:?} is out of range or a self-loop"
                )
            }
            Self::UnknownAccess { array, loop_id } => {
                write!(f, "array `{array}` accessed by unknown loop `{loop_id}`")
            }
        }
    }
}

/// Instruction counts in one loop body.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpCounts {
    #[serde(default)]
    pub load: u32,
    #[serde(default)]
    pub mul: u32,
    #[serde(default)]
    pub add: u32,
    #[serde(default)]
    pub store: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Load,
    Mul,
    Add,
    Store,
}

impl OpKind {
    fn instruction_type(self) -> u32 {
        match self {
            OpKind::Load => 1,
            OpKind::Store => 2,
            OpKind::Add => 3,
            OpKind::Mul => 4,
        }
    }

    /// Per-node `(latency, lut, dsp, ff)` annotations.
    pub fn cost(self) -> [u32; 4] {
        match self {
            OpKind::Load => [2, 10, 0, 20],
            OpKind::Mul => [3, 8, 3, 64],
            OpKind::Add => [1, 32, 0, 32],
            OpKind::Store => [1, 10, 0, 10],
        }
    }
}

impl OpCounts {
    pub fn total(&self) -> u32 {
        self.load + self.mul + self.add + self.store
    }

    /// Body operations in canonical order.
    pub fn sequence(&self) -> Vec<OpKind> {
        let mut out = Vec::with_capacity(self.total() as usize);
        out.extend(std::iter::repeat(OpKind::Load).take(self.load as usize));
        out.extend(std::iter::repeat(OpKind::Mul).take(self.mul as usize));
        out.extend(std::iter::repeat(OpKind::Add).take(self.add as usize));
        out.extend(std::iter::repeat(OpKind::Store).take(self.store as usize));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSpec {
    pub id: String,
    pub trip_count: u64,
    pub ops: OpCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Operand links `[producer, consumer]` as indices into the body sequence.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub data_links: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    pub name: String,
    pub size: u64,
    /// Loops reading or writing the array.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub accessed_by: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelDescription {
    pub kernel_id: String,
    pub source_template: String,
    pub loops: Vec<LoopSpec>,
    #[serde(default)]
    pub arrays: Vec<ArraySpec>,
}

impl KernelDescription {
    /// Collects every invariant violation.
    pub fn validate(&self) -> Result<(), CdfgError> {
        let mut issues = Vec::new();
        if self.loops.is_empty() {
            issues.push(DescriptionIssue::NoLoops);
        }
        let mut ids = HashSet::new();
        for l in &self.loops {
            if !ids.insert(l.id.as_str()) {
                issues.push(DescriptionIssue::DuplicateLoop(l.id.clone()));
            }
            if l.trip_count == 0 {
                issues.push(DescriptionIssue::ZeroTrip(l.id.clone()));
            }
            let n = l.ops.total() as usize;
            for link in &l.data_links {
                if link[0] >= n || link[1] >= n || link[0] == link[1] {
                    issues.push(DescriptionIssue::BadLink {
                        loop_id: l.id.clone(),
                        link: *link,
                    });
                }
            }
        }
        let parents: HashMap<&str, &str> = self
            .loops
            .iter()
            .filter_map(|l| l.parent.as_deref().map(|p| (l.id.as_str(), p)))
            .collect();
        for (child, parent) in &parents {
            if !ids.contains(parent) {
                issues.push(DescriptionIssue::UnknownParent {
                    loop_id: child.to_string(),
                    parent: parent.to_string(),
                });
            }
        }
        let mut cyclic: Vec<String> = Vec::new();
        for l in &self.loops {
            let mut seen = HashSet::new();
            let mut cur = l.id.as_str();
            while let Some(&p) = parents.get(cur) {
                if !seen.insert(cur) || p == l.id {
                    cyclic.push(l.id.clone());
                    break;
                }
                cur = p;
            }
        }
        if !cyclic.is_empty() {
            cyclic.sort();
            issues.push(DescriptionIssue::CyclicNesting(cyclic));
        }
        let mut arrays = HashSet::new();
        for a in &self.arrays {
            if !arrays.insert(a.name.as_str()) {
                issues.push(DescriptionIssue::DuplicateArray(a.name.clone()));
            }
            for l in &a.accessed_by {
                if !ids.contains(l.as_str()) {
                    issues.push(DescriptionIssue::UnknownAccess {
                        array: a.name.clone(),
                        loop_id: l.clone(),
                    });
                }
            }
        }
        for slot in template_slots(&self.source_template) {
            let target = slot_target(&slot);
            if !ids.contains(target) && !arrays.contains(target) {
                issues.push(DescriptionIssue::DanglingSlot(slot));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(CdfgError::Description(issues))
        }
    }

    fn depth(&self, id: &str) -> usize {
        let mut depth = 0;
        let mut cur = id;
        while let Some(p) = self
            .loops
            .iter()
            .find(|l| l.id == cur)
            .and_then(|l| l.parent.as_deref())
        {
            depth += 1;
            cur = p;
        }
        depth
    }
}

/// The loop or array a slot refers to: the slot name up to its first `.`.
pub fn slot_target(slot: &str) -> &str {
    slot.split('.').next().unwrap_or(slot)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Flow {
    Control,
    Data,
    Call,
    Pragma,
}

impl From<Flow> for u8 {
    fn from(f: Flow) -> u8 {
        match f {
            Flow::Control => 0,
            Flow::Data => 1,
            Flow::Call => 2,
            Flow::Pragma => 3,
        }
    }
}

impl TryFrom<u8> for Flow {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Flow::Control),
            1 => Ok(Flow::Data),
            2 => Ok(Flow::Call),
            3 => Ok(Flow::Pragma),
            _ => Err(format!("unknown flow {v}, expected 0..=3")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeFeatures {
    #[serde(rename = "nt")]
    pub node_type: u32,
    #[serde(rename = "it")]
    pub instruction_type: u32,
    #[serde(rename = "ft")]
    pub function_type: u32,
    #[serde(rename = "bt")]
    pub block_type: u32,
    #[serde(rename = "lat")]
    pub latency_cycles: u32,
    pub lut: u32,
    pub dsp: u32,
    pub ff: u32,
}

impl NodeFeatures {
    fn categorical(&self) -> [u32; 4] {
        [
            self.node_type,
            self.instruction_type,
            self.function_type,
            self.block_type,
        ]
    }

    fn numeric(&self) -> [u32; 4] {
        [self.latency_cycles, self.lut, self.dsp, self.ff]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub flow: Flow,
    #[serde(rename = "pos")]
    pub position: u32,
}

/// A control/data-flow graph; also its interchange document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cdfg {
    pub kernel_id: String,
    pub vocab_sizes: [u32; 4],
    pub nodes: Vec<NodeFeatures>,
    pub edges: Vec<Edge>,
}

/// A built graph plus the node index of every loop and array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelGraph {
    pub graph: Cdfg,
    pub targets: BTreeMap<String, usize>,
}

/// Deterministic graph construction from a description.
pub fn build_cdfg(desc: &KernelDescription) -> Result<KernelGraph, CdfgError> {
    desc.validate()?;
    let mut loops: Vec<&LoopSpec> = desc.loops.iter().collect();
    loops.sort_by(|a, b| a.id.cmp(&b.id));

    let mut nodes = Vec::new();
    let mut targets = BTreeMap::new();
    let depth_of = |id: &str| (desc.depth(id).min(BLOCK_TYPES - 1)) as u32;
    for l in &loops {
        targets.insert(l.id.clone(), nodes.len());
        nodes.push(NodeFeatures {
            node_type: NT_BLOCK,
            block_type: depth_of(&l.id),
            ..Default::default()
        });
    }

    let mut edges = Vec::new();
    // parent → child control edges, position = rank among the parent's children
    let mut child_rank: HashMap<&str, u32> = HashMap::new();
    for l in &loops {
        if let Some(p) = &l.parent {
            let rank = child_rank.entry(p.as_str()).or_insert(0);
            edges.push(Edge {
                src: targets[p],
                dst: targets[&l.id],
                flow: Flow::Control,
                position: *rank,
            });
            *rank += 1;
        }
    }

    for l in &loops {
        let block = targets[&l.id];
        let first = nodes.len();
        for (pos, op) in l.ops.sequence().into_iter().enumerate() {
            let [lat, lut, dsp, ff] = op.cost();
            let id = nodes.len();
            nodes.push(NodeFeatures {
                node_type: NT_INSTRUCTION,
                instruction_type: op.instruction_type(),
                function_type: 0,
                block_type: depth_of(&l.id),
                latency_cycles: lat,
                lut,
                dsp,
                ff,
            });
            edges.push(Edge {
                src: block,
                dst: id,
                flow: Flow::Control,
                position: pos as u32,
            });
        }
        for link in &l.data_links {
            edges.push(Edge {
                src: first + link[0],
                dst: first + link[1],
                flow: Flow::Data,
                position: 0,
            });
        }
    }

    for a in &desc.arrays {
        let id = nodes.len();
        targets.insert(a.name.clone(), id);
        nodes.push(NodeFeatures {
            node_type: NT_VARIABLE,
            ..Default::default()
        });
        for l in &a.accessed_by {
            edges.push(Edge {
                src: id,
                dst: targets[l],
                flow: Flow::Data,
                position: 0,
            });
        }
    }

    Ok(KernelGraph {
        graph: Cdfg {
            kernel_id: desc.kernel_id.clone(),
            vocab_sizes: DEFAULT_VOCAB,
            nodes,
            edges,
        },
        targets,
    })
}

fn pragma_instruction_type(kind: PragmaKind) -> u32 {
    match kind {
        PragmaKind::Pipeline => 5,
        PragmaKind::Unroll => 6,
        PragmaKind::ArrayPartition => 7,
        PragmaKind::Tile => 8,
    }
}

/// Returns a copy of `kg` with one pragma node per active directive, linked
/// to its target by a pragma edge whose position is the value index.
pub fn insert_pragma_nodes(
    kg: &KernelGraph,
    space: &DesignSpace,
    cfg: &DesignConfiguration,
) -> Result<Cdfg, CdfgError> {
    space.check(cfg)?;
    let mut g = kg.graph.clone();
    for (i, d) in space.directives.iter().enumerate() {
        let index = cfg.indices()[i];
        if d.domain[index].is_disabled() {
            continue;
        }
        let &target = kg
            .targets
            .get(&d.target)
            .ok_or_else(|| CdfgError::UnknownTarget {
                directive: d.name.clone(),
                target: d.target.clone(),
            })?;
        let id = g.nodes.len();
        g.nodes.push(NodeFeatures {
            node_type: NT_PRAGMA,
            instruction_type: pragma_instruction_type(d.kind),
            block_type: g.nodes[target].block_type,
            ..Default::default()
        });
        g.edges.push(Edge {
            src: id,
            dst: target,
            flow: Flow::Pragma,
            position: index as u32,
        });
    }
    Ok(g)
}

/// Maxima used to scale the numeric node features into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureScale {
    pub latency: u32,
    pub lut: u32,
    pub dsp: u32,
    pub ff: u32,
}

impl Default for FeatureScale {
    /// Maxima of the built-in operation cost table.
    fn default() -> Self {
        Self {
            latency: 3,
            lut: 32,
            dsp: 3,
            ff: 64,
        }
    }
}

impl FeatureScale {
    fn maxima(&self) -> [u32; 4] {
        [self.latency, self.lut, self.dsp, self.ff]
    }
}

const FIELD_NAMES: [&str; 4] = [
    "node_type",
    "instruction_type",
    "function_type",
    "block_type",
];

impl Cdfg {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Width of an encoded feature row.
    pub fn feature_dim(&self) -> usize {
        self.vocab_sizes.iter().map(|&v| v as usize).sum::<usize>() + 4
    }

    /// `(sources, destinations)` in edge order.
    pub fn edge_index(&self) -> (Vec<usize>, Vec<usize>) {
        self.edges.iter().map(|e| (e.src, e.dst)).unzip()
    }

    /// One-hot categorical segments followed by scaled numeric fields.
    pub fn encode_node_features(&self, scale: &FeatureScale) -> Result<Tensor, CdfgError> {
        let d = self.feature_dim();
        let mut data = vec![0.0; self.nodes.len() * d];
        let maxima = scale.maxima();
        for (i, node) in self.nodes.iter().enumerate() {
            let row = &mut data[i * d..(i + 1) * d];
            let mut offset = 0;
            for (f, (&value, &vocab)) in
                node.categorical().iter().zip(&self.vocab_sizes).enumerate()
            {
                if value >= vocab {
                    return Err(CdfgError::Feature {
                        node: i,
                        field: FIELD_NAMES[f],
                        value,
                        vocab,
                    });
                }
                row[offset + value as usize] = 1.0;
                offset += vocab as usize;
            }
            for (k, (&v, &m)) in node.numeric().iter().zip(&maxima).enumerate() {
                row[offset + k] = if m == 0 {
                    0.0
                } else {
                    (v as f64 / m as f64).min(1.0)
                };
            }
        }
        Ok(Tensor::matrix(self.nodes.len(), d, data).expect("sized above"))
    }

    /// Edge ids grouped by destination (incoming) and by source (outgoing).
    pub fn split_edges_by_direction(&self) -> EdgeViews {
        let n = self.nodes.len();
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for (i, e) in self.edges.iter().enumerate() {
            incoming[e.dst].push(i);
            outgoing[e.src].push(i);
        }
        EdgeViews { incoming, outgoing }
    }

    pub fn is_weakly_connected(&self) -> bool {
        let n = self.nodes.len();
        if n == 0 {
            return false;
        }
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            adj[e.src].push(e.dst);
            adj[e.dst].push(e.src);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
        count == n
    }

    /// Checks every graph invariant, naming the offending field.
    pub fn validate(&self) -> Result<(), CdfgError> {
        let invalid = |field: String, message: String| CdfgError::Invalid { field, message };
        if self.nodes.is_empty() {
            return Err(invalid("nodes".into(), "graph has no nodes".into()));
        }
        for (f, &v) in self.vocab_sizes.iter().enumerate() {
            if v == 0 {
                return Err(invalid(
                    format!("vocab_sizes[{f}]"),
                    "vocabulary size 0".into(),
                ));
            }
        }
        const KEYS: [&str; 4] = ["nt", "it", "ft", "bt"];
        for (i, node) in self.nodes.iter().enumerate() {
            for (k, (&v, &vocab)) in node.categorical().iter().zip(&self.vocab_sizes).enumerate() {
                if v >= vocab {
                    return Err(invalid(
                        format!("nodes[{i}].{}", KEYS[k]),
                        format!("index {v} not below vocabulary size {vocab}"),
                    ));
                }
            }
        }
        let n = self.nodes.len();
        for (i, e) in self.edges.iter().enumerate() {
            if e.src >= n {
                return Err(invalid(
                    format!("edges[{i}].src"),
                    format!("node {} out of range", e.src),
                ));
            }
            if e.dst >= n {
                return Err(invalid(
                    format!("edges[{i}].dst"),
                    format!("node {} out of range", e.dst),
                ));
            }
            if e.src == e.dst {
                return Err(invalid(format!("edges[{i}]"), "self-loop".into()));
            }
        }
        if !self.is_weakly_connected() {
            return Err(invalid(
                "edges".into(),
                "graph is not weakly connected".into(),
            ));
        }
        Ok(())
    }

    pub fn export(&self) -> String {
        doc::to_string(self)
    }

    pub fn import(text: &str, origin: &str) -> Result<Self, CdfgError> {
        let g: Cdfg = doc::from_str(text, origin)?;
        g.validate()?;
        Ok(g)
    }

    pub fn write(&self, path: &Path) -> Result<(), CdfgError> {
        Ok(doc::write(path, self)?)
    }

    pub fn read(path: &Path) -> Result<Self, CdfgError> {
        let g: Cdfg = doc::read(path)?;
        g.validate()?;
        Ok(g)
    }
}

/// Per-node incoming and outgoing edge ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeViews {
    pub incoming: Vec<Vec<usize>>,
    pub outgoing: Vec<Vec<usize>>,
}
