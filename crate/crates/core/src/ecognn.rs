//! Cooperative graph encoder with per-node communication actions.
//!
//! Each layer normalises the node states, lets every node pick a soft
//! action over `S, L_in, L_out, B, I` (standard, listen to incoming, listen
//! to outgoing, broadcast, isolate) through a Gumbel-Softmax, turns the
//! actions into directed edge weights and aggregates weighted means of
//! incoming and outgoing neighbours. A gated attention sum reads the graph
//! out.
//!
//! Edge weights for an edge `u → v`, with `a` the action distribution:
//!
//! ```text
//! broadcast(x)  = a_S(x) + a_B(x)
//! listen_in(x)  = a_S(x) + a_Lin(x)
//! listen_out(x) = a_S(x) + a_Lout(x)
//! w_in(u → v)   = broadcast(u) · listen_in(v)     v hears u
//! w_out(u → v)  = broadcast(v) · listen_out(u)    u hears v
//! ```
//!
//! Several graphs are encoded at once as a disjoint union; `graph_of`
//! assigns nodes to graphs for the readout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cdfg::{Cdfg, CdfgError, FeatureScale};
use crate::tensor::{LayerNorm, Linear, Mlp, ParamStore, Tape, Tensor, TensorError, Var};

pub const NUM_ACTIONS: usize = 5;
pub const DEFAULT_TAU_MIN: f64 = 0.1;
const WEIGHT_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EcognnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] CdfgError),
    #[error("graph batch has no nodes")]
    EmptyGraph,
    #[error("graph {0} of the batch has no nodes")]
    EmptyMember(usize),
    #[error("invalid encoder configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, EcognnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Standard = 0,
    ListenIn = 1,
    ListenOut = 2,
    Broadcast = 3,
    Isolate = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcognnConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub temp_hidden: usize,
    pub tau_min: f64,
}

impl EcognnConfig {
    pub fn new(in_dim: usize, hidden: usize, layers: usize) -> Self {
        Self {
            in_dim,
            hidden,
            layers,
            temp_hidden: 32,
            tau_min: DEFAULT_TAU_MIN,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden == 0 || self.temp_hidden == 0 {
            return Err(EcognnError::Config("dimensions must be positive".into()));
        }
        if self.layers == 0 {
            return Err(EcognnError::Config("at least one layer is required".into()));
        }
        if self.tau_min.is_nan() || self.tau_min <= 0.0 {
            return Err(EcognnError::Config(
                "temperature floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Node features and edges of one or more graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub features: Tensor,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub graph_of: Vec<usize>,
    pub num_graphs: usize,
}

impl GraphBatch {
    pub fn new(features: Tensor, edges: &[(usize, usize)]) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(EcognnError::EmptyGraph);
        }
        if let Some(&(s, d)) = edges.iter().find(|(s, d)| *s >= n || *d >= n) {
            return Err(EcognnError::Tensor(TensorError::IndexOutOfRange {
                op: "graph edge",
                index: s.max(d),
                len: n,
            }));
        }
        Ok(Self {
            features,
            src: edges.iter().map(|e| e.0).collect(),
            dst: edges.iter().map(|e| e.1).collect(),
            graph_of: vec![0; n],
            num_graphs: 1,
        })
    }

    pub fn from_graphs(graphs: &[&Cdfg], scale: &FeatureScale) -> Result<Self> {
        let mut rows = Vec::new();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut graph_of = Vec::new();
        let mut cols = 0;
        for (gi, g) in graphs.iter().enumerate() {
            if g.nodes.is_empty() {
                return Err(EcognnError::EmptyMember(gi));
            }
            let offset = graph_of.len();
            let x = g.encode_node_features(scale)?;
            cols = x.cols();
            rows.extend_from_slice(x.data());
            graph_of.extend(std::iter::repeat(gi).take(x.rows()));
            for e in &g.edges {
                src.push(offset + e.src);
                dst.push(offset + e.dst);
            }
        }
        if graph_of.is_empty() {
            return Err(EcognnError::EmptyGraph);
        }
        Ok(Self {
            features: Tensor::matrix(graph_of.len(), cols, rows)?,
            src,
            dst,
            graph_of,
            num_graphs: graphs.len(),
        })
    }

    /// Disjoint union; graph indices are renumbered consecutively.
    pub fn concat(parts: &[&GraphBatch]) -> Result<Self> {
        let first = parts.first().ok_or(EcognnError::EmptyGraph)?;
        let cols = first.features.cols();
        let mut rows = Vec::new();
        let (mut src, mut dst, mut graph_of) = (Vec::new(), Vec::new(), Vec::new());
        let mut graphs = 0;
        for p in parts {
            if p.features.cols() != cols {
                return Err(EcognnError::Tensor(TensorError::ShapeMismatch {
                    op: "graph batch concat",
                    left: first.features.shape().to_vec(),
                    right: p.features.shape().to_vec(),
                }));
            }
            let offset = graph_of.len();
            rows.extend_from_slice(p.features.data());
            src.extend(p.src.iter().map(|s| s + offset));
            dst.extend(p.dst.iter().map(|d| d + offset));
            graph_of.extend(p.graph_of.iter().map(|g| g + graphs));
            graphs += p.num_graphs;
        }
        Ok(Self {
            features: Tensor::matrix(graph_of.len(), cols, rows)?,
            src,
            dst,
            graph_of,
            num_graphs: graphs,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph_of.len()
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }
}

/// Forced action distributions, bypassing the action network.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionClamp {
    /// Every node in every layer takes this action with probability one.
    All(Action),
    /// The same `n × 5` distribution in every layer.
    Distribution(Tensor),
}

impl ActionClamp {
    fn tensor(&self, n: usize) -> Result<Tensor> {
        match self {
            ActionClamp::All(a) => {
                let mut t = Tensor::zeros(n, NUM_ACTIONS);
                for i in 0..n {
                    t.data_mut()[i * NUM_ACTIONS + *a as usize] = 1.0;
                }
                Ok(t)
            }
            ActionClamp::Distribution(t) => {
                if t.shape() != [n, NUM_ACTIONS] {
                    return Err(EcognnError::Config(format!(
                        "clamped distribution has shape {:?}, expected [{n}, {NUM_ACTIONS}]",
                        t.shape()
                    )));
                }
                Ok(t.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EncodeOptions {
    pub mode: Mode,
    /// Seeds the Gumbel noise in train mode.
    pub seed: u64,
    pub clamp: Option<ActionClamp>,
}

impl EncodeOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            seed,
            clamp: None,
        }
    }
}

/// Standard Gumbel samples `-ln(-ln U)`, `rows × cols`.
pub fn gumbel_noise(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// `softmax((logits + noise) / tau)` row-wise; `tau` is `n × 1` and the
/// noise is a constant.
pub fn gumbel_softmax(
    tape: &mut Tape<'_>,
    logits: Var,
    tau: Var,
    noise: Option<Tensor>,
) -> Result<Var> {
    let z = match noise {
        Some(g) => {
            let g = tape.constant(g);
            tape.add(logits, g)?
        }
        None => logits,
    };
    let scaled = tape.div(z, tau)?;
    Ok(tape.softmax(scaled)?)
}

#[derive(Debug, Clone)]
pub struct EcognnLayer {
    pub norm: LayerNorm,
    pub act_self: Linear,
    pub act_neighbors: Linear,
    pub temp: Mlp,
    pub env: Mlp,
}

/// Sum of a node's in- and out-neighbour rows.
fn neighbor_sum(tape: &mut Tape<'_>, h: Var, b: &GraphBatch) -> Result<Var> {
    let n = b.num_nodes();
    let from_src = tape.row_gather(h, &b.src)?;
    let into_dst = tape.index_add(from_src, &b.dst, n)?;
    let from_dst = tape.row_gather(h, &b.dst)?;
    let into_src = tape.index_add(from_dst, &b.src, n)?;
    Ok(tape.add(into_dst, into_src)?)
}

impl EcognnLayer {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &EcognnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.hidden;
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d, rng)?,
            act_self: Linear::new(store, &format!("{name}.act_self"), d, NUM_ACTIONS, rng)?,
            act_neighbors: Linear::new(store, &format!("{name}.act_nb"), d, NUM_ACTIONS, rng)?,
            temp: Mlp::new(
                store,
                &format!("{name}.temp"),
                &[d, cfg.temp_hidden, 1],
                rng,
            )?,
            env: Mlp::new(store, &format!("{name}.env"), &[3 * d, d, d], rng)?,
        })
    }

    pub fn pre_norm(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        Ok(self.norm.forward(tape, h)?)
    }

    /// Sum-aggregation logits over both edge directions, `n × 5`.
    pub fn action_logits(&self, tape: &mut Tape<'_>, h: Var, b: &GraphBatch) -> Result<Var> {
        let own = self.act_self.forward(tape, h)?;
        let nb = neighbor_sum(tape, h, b)?;
        let nb = self.act_neighbors.forward(tape, nb)?;
        Ok(tape.add(own, nb)?)
    }

    /// `softplus(temp(h)) + tau_min`, `n × 1`.
    pub fn temperature(&self, tape: &mut Tape<'_>, h: Var, tau_min: f64) -> Result<Var> {
        let t = self.temp.forward(tape, h)?;
        let t = tape.softplus(t)?;
        Ok(tape.shift(t, tau_min)?)
    }

    pub fn sample_actions(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        b: &GraphBatch,
        tau_min: f64,
        mode: Mode,
        seed: u64,
    ) -> Result<Var> {
        let logits = self.action_logits(tape, h, b)?;
        let tau = self.temperature(tape, h, tau_min)?;
        let noise = match mode {
            Mode::Train => Some(gumbel_noise(b.num_nodes(), NUM_ACTIONS, seed)),
            Mode::Eval => None,
        };
        gumbel_softmax(tape, logits, tau, noise)
    }

    /// Combines pre-normalised states with weighted neighbour means.
    pub fn env_update(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        w_in: Var,
        w_out: Var,
        b: &GraphBatch,
    ) -> Result<Var> {
        let n = b.num_nodes();
        let mean = |tape: &mut Tape<'_>, from: &[usize], to: &[usize], w: Var| -> Result<Var> {
            let rows = tape.row_gather(h, from)?;
            let weighted = tape.mul(rows, w)?;
            let num = tape.index_add(weighted, to, n)?;
            let den = tape.index_add(w, to, n)?;
            let den = tape.clamp_min(den, WEIGHT_FLOOR)?;
            Ok(tape.div(num, den)?)
        };
        let m_in = mean(tape, &b.src, &b.dst, w_in)?;
        let m_out = mean(tape, &b.dst, &b.src, w_out)?;
        let cat = tape.concat(&[h, m_in, m_out])?;
        Ok(self.env.forward(tape, cat)?)
    }
}

/// Per-edge `(w_in, w_out)`, each `E × 1`.
pub fn derive_edge_weights(tape: &mut Tape<'_>, a: Var, b: &GraphBatch) -> Result<(Var, Var)> {
    let col = |tape: &mut Tape<'_>, k: Action| tape.slice_cols(a, k as usize, 1);
    let s = col(tape, Action::Standard)?;
    let lin = col(tape, Action::ListenIn)?;
    let lout = col(tape, Action::ListenOut)?;
    let bc = col(tape, Action::Broadcast)?;
    let broadcast = tape.add(s, bc)?;
    let listen_in = tape.add(s, lin)?;
    let listen_out = tape.add(s, lout)?;

    let b_src = tape.row_gather(broadcast, &b.src)?;
    let l_dst = tape.row_gather(listen_in, &b.dst)?;
    let w_in = tape.mul(b_src, l_dst)?;

    let b_dst = tape.row_gather(broadcast, &b.dst)?;
    let l_src = tape.row_gather(listen_out, &b.src)?;
    let w_out = tape.mul(b_dst, l_src)?;
    Ok((w_in, w_out))
}

#[derive(Debug, Clone)]
pub struct Readout {
    pub gate: Mlp,
    pub embed: Mlp,
}

impl Readout {
    /// `Σ_v sigmoid(gate(h_v)) ⊙ tanh(embed(h_v))` per graph.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        graph_of: &[usize],
        num_graphs: usize,
    ) -> Result<Var> {
        if graph_of.is_empty() {
            return Err(EcognnError::EmptyGraph);
        }
        let g = self.gate.forward(tape, h)?;
        let g = tape.sigmoid(g)?;
        let e = self.embed.forward(tape, h)?;
        let e = tape.tanh(e)?;
        let ge = tape.mul(g, e)?;
        Ok(tape.index_add(ge, graph_of, num_graphs)?)
    }
}

#[derive(Debug, Clone)]
pub struct Ecognn {
    pub config: EcognnConfig,
    pub input: Linear,
    pub layers: Vec<EcognnLayer>,
    pub readout: Readout,
}

#[derive(Debug, Clone)]
pub struct EncodeOutput {
    /// `num_graphs × hidden`.
    pub graph_embedding: Var,
    /// Final node states before the readout.
    pub node_states: Var,
    /// Action distribution of each layer.
    pub actions: Vec<Var>,
}

impl Ecognn {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        config: EcognnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let input = Linear::new(store, &format!("{name}.input"), config.in_dim, d, rng)?;
        let layers = (0..config.layers)
            .map(|i| EcognnLayer::new(store, &format!("{name}.l{i}"), &config, rng))
            .collect::<Result<_>>()?;
        let readout = Readout {
            gate: Mlp::new(store, &format!("{name}.readout.gate"), &[d, d], rng)?,
            embed: Mlp::new(store, &format!("{name}.readout.embed"), &[d, d], rng)?,
        };
        Ok(Self {
            config,
            input,
            layers,
            readout,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        batch: &GraphBatch,
        opts: &EncodeOptions,
    ) -> Result<EncodeOutput> {
        let n = batch.num_nodes();
        if n == 0 {
            return Err(EcognnError::EmptyGraph);
        }
        if batch.features.cols() != self.config.in_dim {
            return Err(EcognnError::Tensor(TensorError::ShapeMismatch {
                op: "ecognn input",
                left: batch.features.shape().to_vec(),
                right: vec![self.config.in_dim],
            }));
        }
        let clamp = opts.clamp.as_ref().map(|c| c.tensor(n)).transpose()?;
        let x = tape.constant(batch.features.clone());
        let mut h = self.input.forward(tape, x)?;
        let mut actions = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let hn = layer.pre_norm(tape, h)?;
            let a = match &clamp {
                Some(t) => tape.constant(t.clone()),
                None => {
                    let seed = opts.seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                    layer.sample_actions(tape, hn, batch, self.config.tau_min, opts.mode, seed)?
                }
            };
            let (w_in, w_out) = derive_edge_weights(tape, a, batch)?;
            h = layer.env_update(tape, hn, w_in, w_out, batch)?;
            actions.push(a);
        }
        let graph_embedding = self
            .readout
            .forward(tape, h, &batch.graph_of, batch.num_graphs)?;
        Ok(EncodeOutput {
            graph_embedding,
            node_states: h,
            actions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, FdConfig};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn ring(n: usize, d: usize) -> GraphBatch {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        GraphBatch::new(random(n, d, 3), &edges).unwrap()
    }

    #[test]
    fn pre_norm_matches_direct_standardisation() {
        let mut store = ParamStore::new();
        let layer =
            EcognnLayer::new(&mut store, "l", &EcognnConfig::new(8, 8, 1), &mut rng()).unwrap();
        let x = random(4, 8, 1);
        let mut tape = Tape::new(&store);
        let v = tape.constant(x.clone());
        let out = layer.pre_norm(&mut tape, v).unwrap();
        for r in 0..4 {
            let row = x.row_slice(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for c in 0..8 {
                let want = (row[c] - mean) / (var + 1e-5).sqrt();
                assert!((tape.value(out).get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_without_noise_give_fifth() {
        let mut tape = Tape::detached();
        let logits = tape.constant(Tensor::filled(3, 5, 0.7));
        let tau = tape.constant(Tensor::filled(3, 1, 0.4));
        let y = gumbel_softmax(&mut tape, logits, tau, None).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn low_temperature_follows_noisy_argmax() {
        for draw in 0..100 {
            let logits = random(1, 5, 1000 + draw);
            let noise = gumbel_noise(1, 5, draw);
            let mut tape = Tape::detached();
            let l = tape.constant(logits.clone());
            let tau = tape.constant(Tensor::filled(1, 1, 0.01));
            let y = gumbel_softmax(&mut tape, l, tau, Some(noise.clone())).unwrap();
            let argmax = |v: &[f64]| (0..5).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
            let z: Vec<f64> = logits
                .data()
                .iter()
                .zip(noise.data())
                .map(|(a, b)| a + b)
                .collect();
            assert_eq!(argmax(tape.value(y).data()), argmax(&z));
            let s: f64 = tape.value(y).data().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn edge_weights_by_hand() {
        let edges = [(0, 1), (1, 2), (2, 0), (3, 1), (0, 3)];
        let b = GraphBatch::new(Tensor::zeros(4, 2), &edges).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut a = Tensor::zeros(4, 5);
        for i in 0..4 {
            let raw: Vec<f64> = (0..5).map(|_| r.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for k in 0..5 {
                a.data_mut()[i * 5 + k] = raw[k] / s;
            }
        }
        let mut tape = Tape::detached();
        let av = tape.constant(a.clone());
        let (w_in, w_out) = derive_edge_weights(&mut tape, av, &b).unwrap();
        for (e, &(u, v)) in edges.iter().enumerate() {
            let p = |x: usize, k: usize| a.get(x, k);
            let want_in = (p(u, 0) + p(u, 3)) * (p(v, 0) + p(v, 1));
            let want_out = (p(v, 0) + p(v, 3)) * (p(u, 0) + p(u, 2));
            assert!((tape.value(w_in).get(e, 0) - want_in).abs() < 1e-15);
            assert!((tape.value(w_out).get(e, 0) - want_out).abs() < 1e-15);
        }
    }

    #[test]
    fn broadcaster_to_listener_has_unit_weight() {
        let b = GraphBatch::new(Tensor::zeros(2, 1), &[(0, 1)]).unwrap();
        let mut a = Tensor::zeros(2, 5);
        a.data_mut()[Action::Broadcast as usize] = 1.0;
        a.data_mut()[5 + Action::ListenIn as usize] = 1.0;
        let mut tape = Tape::detached();
        let av = tape.constant(a);
        let (w_in, w_out) = derive_edge_weights(&mut tape, av, &b).unwrap();
        assert_eq!(tape.value(w_in).item().unwrap(), 1.0);
        assert_eq!(tape.value(w_out).item().unwrap(), 0.0);
    }

    #[test]
    fn isolated_node_has_zero_weights() {
        let edges = [(0, 1), (1, 2), (2, 0)];
        let b = GraphBatch::new(Tensor::zeros(3, 1), &edges).unwrap();
        let mut a = Tensor::filled(3, 5, 0.2);
        for k in 0..5 {
            a.data_mut()[5 + k] = if k == Action::Isolate as usize {
                1.0
            } else {
                0.0
            };
        }
        let mut tape = Tape::detached();
        let av = tape.constant(a);
        let (w_in, w_out) = derive_edge_weights(&mut tape, av, &b).unwrap();
        // node 1 is the destination of edge 0 and the source of edge 1
        assert_eq!(tape.value(w_in).get(0, 0), 0.0);
        assert_eq!(tape.value(w_out).get(0, 0), 0.0);
        assert_eq!(tape.value(w_in).get(1, 0), 0.0);
        assert_eq!(tape.value(w_out).get(1, 0), 0.0);
    }

    fn layer_and_store(d: usize) -> (ParamStore, EcognnLayer) {
        let mut store = ParamStore::new();
        let layer =
            EcognnLayer::new(&mut store, "l", &EcognnConfig::new(d, d, 1), &mut rng()).unwrap();
        (store, layer)
    }

    #[test]
    fn zero_weights_give_zero_messages() {
        let (store, layer) = layer_and_store(4);
        let b = ring(3, 4);
        let mut tape = Tape::new(&store);
        let h = tape.constant(b.features.clone());
        let w = tape.constant(Tensor::zeros(3, 1));
        let out = layer.env_update(&mut tape, h, w, w, &b).unwrap();
        let zeros = tape.constant(Tensor::zeros(3, 4));
        let cat = tape.concat(&[h, zeros, zeros]).unwrap();
        let want = layer.env.forward(&mut tape, cat).unwrap();
        assert_eq!(tape.value(out), tape.value(want));
    }

    #[test]
    fn single_unit_edge_copies_source() {
        let (store, layer) = layer_and_store(3);
        let b = GraphBatch::new(random(2, 3, 9), &[(0, 1)]).unwrap();
        let mut tape = Tape::new(&store);
        let h = tape.constant(b.features.clone());
        let one = tape.constant(Tensor::filled(1, 1, 1.0));
        let zero = tape.constant(Tensor::zeros(1, 1));
        let out = layer.env_update(&mut tape, h, one, zero, &b).unwrap();
        let mut m_in = Tensor::zeros(2, 3);
        m_in.data_mut()[3..].copy_from_slice(b.features.row_slice(0));
        let m = tape.constant(m_in);
        let z = tape.constant(Tensor::zeros(2, 3));
        let cat = tape.concat(&[h, m, z]).unwrap();
        let want = layer.env.forward(&mut tape, cat).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(want)) < 1e-15);
    }

    #[test]
    fn env_update_matches_message_loop() {
        let (store, layer) = layer_and_store(4);
        let edges = [
            (0, 1),
            (1, 2),
            (2, 3),
            (3, 4),
            (4, 5),
            (5, 0),
            (0, 3),
            (2, 5),
        ];
        let b = GraphBatch::new(random(6, 4, 21), &edges).unwrap();
        let wi = random(8, 1, 22)
            .data()
            .iter()
            .map(|v| v.abs())
            .collect::<Vec<_>>();
        let wo = random(8, 1, 23)
            .data()
            .iter()
            .map(|v| v.abs())
            .collect::<Vec<_>>();
        let mut tape = Tape::new(&store);
        let h = tape.constant(b.features.clone());
        let w_in = tape.constant(Tensor::column(&wi));
        let w_out = tape.constant(Tensor::column(&wo));
        let out = layer.env_update(&mut tape, h, w_in, w_out, &b).unwrap();

        let x = &b.features;
        let mut cat = Tensor::zeros(6, 12);
        for v in 0..6 {
            let (mut num_in, mut den_in) = (vec![0.0; 4], 0.0);
            let (mut num_out, mut den_out) = (vec![0.0; 4], 0.0);
            for (e, &(s, d)) in edges.iter().enumerate() {
                if d == v {
                    den_in += wi[e];
                    for c in 0..4 {
                        num_in[c] += wi[e] * x.get(s, c);
                    }
                }
                if s == v {
                    den_out += wo[e];
                    for c in 0..4 {
                        num_out[c] += wo[e] * x.get(d, c);
                    }
                }
            }
            for c in 0..4 {
                cat.data_mut()[v * 12 + c] = x.get(v, c);
                cat.data_mut()[v * 12 + 4 + c] = num_in[c] / den_in.max(1e-9);
                cat.data_mut()[v * 12 + 8 + c] = num_out[c] / den_out.max(1e-9);
            }
        }
        let c = tape.constant(cat);
        let want = layer.env.forward(&mut tape, c).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(want)) < 1e-12);
    }

    fn model(d_in: usize, d: usize, k: usize) -> (ParamStore, Ecognn) {
        let mut store = ParamStore::new();
        let m = Ecognn::new(&mut store, "g", EcognnConfig::new(d_in, d, k), &mut rng()).unwrap();
        (store, m)
    }

    #[test]
    fn readout_single_node_saturated_gate() {
        let (mut store, m) = model(3, 4, 1);
        let gb = m.readout.gate.layers[0].bias;
        *store.value_mut(gb) = Tensor::filled(1, 4, 1e3);
        let x = random(1, 4, 5);
        let mut tape = Tape::new(&store);
        let h = tape.constant(x);
        let g = m.readout.forward(&mut tape, h, &[0], 1).unwrap();
        let e = m.readout.embed.forward(&mut tape, h).unwrap();
        let e = tape.tanh(e).unwrap();
        assert!(tape.value(g).max_abs_diff(tape.value(e)) < 1e-12);
    }

    #[test]
    fn readout_is_permutation_invariant() {
        let (store, m) = model(3, 4, 1);
        let x = random(8, 4, 6);
        let perm = [3, 7, 0, 5, 1, 6, 2, 4];
        let mut tape = Tape::new(&store);
        let h = tape.constant(x.clone());
        let a = m.readout.forward(&mut tape, h, &[0; 8], 1).unwrap();
        let hp = tape.row_gather(h, &perm).unwrap();
        let b = m.readout.forward(&mut tape, hp, &[0; 8], 1).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);

        // brute-force sum
        let mut want = vec![0.0; 4];
        for r in 0..8 {
            let hr = tape.constant(Tensor::row(x.row_slice(r)));
            let g = m.readout.gate.forward(&mut tape, hr).unwrap();
            let e = m.readout.embed.forward(&mut tape, hr).unwrap();
            for c in 0..4 {
                let gv = 1.0 / (1.0 + (-tape.value(g).get(0, c)).exp());
                want[c] += gv * tape.value(e).get(0, c).tanh();
            }
        }
        for c in 0..4 {
            assert!((tape.value(a).get(0, c) - want[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_readout_is_an_error() {
        let (store, m) = model(3, 4, 1);
        let mut tape = Tape::new(&store);
        let h = tape.constant(Tensor::zeros(0, 4));
        assert!(matches!(
            m.readout.forward(&mut tape, h, &[], 1),
            Err(EcognnError::EmptyGraph)
        ));
    }

    #[test]
    fn single_node_graph_reduces_to_zero_messages() {
        let (store, m) = model(3, 4, 1);
        let b = GraphBatch::new(random(1, 3, 8), &[]).unwrap();
        let mut tape = Tape::new(&store);
        let out = m.encode(&mut tape, &b, &EncodeOptions::eval()).unwrap();
        let x = tape.constant(b.features.clone());
        let h0 = m.input.forward(&mut tape, x).unwrap();
        let hn = m.layers[0].pre_norm(&mut tape, h0).unwrap();
        let z = tape.constant(Tensor::zeros(1, 4));
        let cat = tape.concat(&[hn, z, z]).unwrap();
        let h1 = m.layers[0].env.forward(&mut tape, cat).unwrap();
        let want = m.readout.forward(&mut tape, h1, &[0], 1).unwrap();
        assert!(
            tape.value(out.graph_embedding)
                .max_abs_diff(tape.value(want))
                < 1e-15
        );
    }

    #[test]
    fn eval_is_deterministic_and_train_is_seeded() {
        let (store, m) = model(3, 6, 2);
        let b = ring(5, 3);
        let run = |opts: &EncodeOptions| {
            let mut tape = Tape::new(&store);
            let o = m.encode(&mut tape, &b, opts).unwrap();
            tape.value(o.graph_embedding).clone()
        };
        assert_eq!(run(&EncodeOptions::eval()), run(&EncodeOptions::eval()));
        assert_eq!(run(&EncodeOptions::train(3)), run(&EncodeOptions::train(3)));
        assert_ne!(run(&EncodeOptions::train(3)), run(&EncodeOptions::train(4)));
    }

    #[test]
    fn action_rows_are_distributions() {
        let (store, m) = model(3, 6, 2);
        let b = ring(5, 3);
        let mut tape = Tape::new(&store);
        let o = m.encode(&mut tape, &b, &EncodeOptions::train(1)).unwrap();
        for a in o.actions {
            let t = tape.value(a);
            for r in 0..t.rows() {
                let s: f64 = t.row_slice(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(t.row_slice(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn batch_equals_separate_graphs() {
        let (store, m) = model(3, 5, 2);
        let g1 = ring(4, 3);
        let g2 = GraphBatch::new(random(2, 3, 77), &[(1, 0)]).unwrap();
        let mut feats = g1.features.data().to_vec();
        feats.extend_from_slice(g2.features.data());
        let mut edges: Vec<_> = g1.src.iter().zip(&g1.dst).map(|(&s, &d)| (s, d)).collect();
        edges.push((5, 4));
        let mut both = GraphBatch::new(Tensor::matrix(6, 3, feats).unwrap(), &edges).unwrap();
        both.graph_of = vec![0, 0, 0, 0, 1, 1];
        both.num_graphs = 2;
        let enc = |b: &GraphBatch| {
            let mut tape = Tape::new(&store);
            let o = m.encode(&mut tape, b, &EncodeOptions::eval()).unwrap();
            tape.value(o.graph_embedding).clone()
        };
        let joint = enc(&both);
        let a = enc(&g1);
        let b = enc(&g2);
        assert!(joint
            .row_slice(0)
            .iter()
            .zip(a.data())
            .all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(joint
            .row_slice(1)
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn encode_gradients_match_finite_differences() {
        let (mut store, m) = model(3, 4, 2);
        let b =
            GraphBatch::new(random(4, 3, 31), &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]).unwrap();
        let report = finite_diff_check(
            &mut store,
            |tape| {
                let o = m.encode(tape, &b, &EncodeOptions::train(5))?;
                let s = tape.square(o.graph_embedding)?;
                Ok::<_, EcognnError>(tape.sum_all(s)?)
            },
            &FdConfig::default(),
        )
        .unwrap();
        assert!(report.passes(1e-3), "{:?}", report.worst());
    }
}
