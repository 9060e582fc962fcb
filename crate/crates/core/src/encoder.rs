//! Graph-structured recurrent Q-policy.
//!
//! Every node of the observation graph is first encoded from its own
//! observation rows: the observed entities are embedded one by one and
//! sum-pooled (separately for UAV and user entities), so the encoding does
//! not depend on entity labels. UAV nodes pass the pooled observation
//! through a shared GRU together with their previous hidden state; user
//! nodes use a shared two-layer perceptron. `L` message-passing layers
//! (EdgeConv, or plain neighbour aggregation for the baseline) refine the
//! node features with residual connections, and a shared linear head turns
//! each UAV node's final feature into eight direction values. User node
//! outputs are dropped.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{JointAction, ObservationSet, WorldConfig, NUM_DIRECTIONS};
use crate::error::{contract, Error, Result};
use crate::nn::{Graph, GruCell, Linear, Mlp2, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// EdgeConv message passing (Qedgix).
    #[serde(rename = "edgeconv")]
    EdgeConv,
    /// Plain neighbour-sum aggregation baseline.
    #[serde(rename = "agg-baseline")]
    Agg,
    /// No graph layers: recurrent encoder + head only (plain QMIX agent).
    #[serde(rename = "none-baseline")]
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Node feature width `F`; also the GRU hidden width.
    pub feature_width: usize,
    pub recurrent_width: usize,
    /// Width of each pooled entity embedding (two of them per node).
    pub entity_width: usize,
    pub graph_layers: usize,
    pub graph_hidden_width: usize,
    pub variant: Variant,
    /// Multiplies relative coordinates before they enter the network.
    pub coord_scale: f64,
    /// Multiplies observed ages before they enter the network.
    pub aoi_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_width: 64,
            recurrent_width: 64,
            entity_width: 32,
            graph_layers: 2,
            graph_hidden_width: 64,
            variant: Variant::EdgeConv,
            coord_scale: 1.0 / (7.0 * crate::env::XI_KM),
            aoi_scale: 1.0 / 80.0,
        }
    }
}

impl EncoderConfig {
    /// Input scaling matched to a world: coordinates relative to the
    /// detection range, ages relative to the horizon.
    pub fn for_world(world: &WorldConfig, variant: Variant) -> Self {
        Self {
            variant,
            coord_scale: 1.0 / world.detection_range,
            aoi_scale: 1.0 / world.horizon as f64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.feature_width == 0 || self.entity_width == 0 || self.graph_hidden_width == 0 {
            return bad("feature_width", "widths must be positive");
        }
        if self.recurrent_width != self.feature_width {
            return bad(
                "recurrent_width",
                "the GRU output is the UAV node feature, so it must equal feature_width",
            );
        }
        if self.variant != Variant::None && self.graph_layers == 0 {
            return bad("graph_layers", "graph variants need at least one layer");
        }
        Ok(())
    }
}

/// Directed edge list of a (batched) graph: `dst` aggregates from `src`.
#[derive(Clone, Debug, Default)]
pub struct EdgeList {
    pub dst: Rc<Vec<usize>>,
    pub src: Rc<Vec<usize>>,
    /// In-degree of every node, as a `[nodes × 1]` column.
    pub degree: Vec<f64>,
}

impl EdgeList {
    pub fn from_adjacency(nodes: usize, adjacency: &[u8]) -> Self {
        let mut dst = Vec::new();
        let mut src = Vec::new();
        let mut degree = vec![0.0; nodes];
        for i in 0..nodes {
            for j in 0..nodes {
                if adjacency[i * nodes + j] != 0 {
                    dst.push(i);
                    src.push(j);
                    degree[i] += 1.0;
                }
            }
        }
        Self {
            dst: Rc::new(dst),
            src: Rc::new(src),
            degree,
        }
    }

    pub fn len(&self) -> usize {
        self.dst.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dst.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.degree.len()
    }
}

/// Network-ready view of a batch of observation sets with the same `M`, `N`.
#[derive(Clone, Debug)]
pub struct PolicyInput {
    pub batch: usize,
    pub num_uavs: usize,
    pub num_users: usize,
    /// Scaled `(Δx, Δy)` of every observed UAV entity, one row per pair.
    uav_pairs: Option<(Tensor, Rc<Vec<usize>>)>,
    /// Scaled `(Δx, Δy, age)` of every observed user entity.
    user_pairs: Option<(Tensor, Rc<Vec<usize>>)>,
    pub edges: EdgeList,
    pub uav_nodes: Rc<Vec<usize>>,
    pub user_nodes: Rc<Vec<usize>>,
}

impl PolicyInput {
    pub fn build(observations: &[&ObservationSet], config: &EncoderConfig) -> Result<Self> {
        let first = observations.first().ok_or_else(|| contract("empty observation batch"))?;
        let (m, n) = (first.num_uavs, first.num_users);
        let nodes = m + n;
        let mut uav_feats = Vec::new();
        let mut uav_dst = Vec::new();
        let mut user_feats = Vec::new();
        let mut user_dst = Vec::new();
        let mut uav_nodes = Vec::with_capacity(m * observations.len());
        let mut user_nodes = Vec::with_capacity(n * observations.len());
        let cs = config.coord_scale;
        for (b, obs) in observations.iter().enumerate() {
            if obs.num_uavs != m || obs.num_users != n {
                return Err(contract("observation sets in one batch differ in size"));
            }
            let base = b * nodes;
            uav_nodes.extend((0..m).map(|i| base + i));
            user_nodes.extend((m..nodes).map(|i| base + i));
            for i in 0..nodes {
                for j in 0..nodes {
                    if !obs.adjacent(i, j) {
                        continue;
                    }
                    if j < m {
                        let e = obs.uav_entry(i, j);
                        uav_feats.extend_from_slice(&[e[0] * cs, e[1] * cs]);
                        uav_dst.push(base + i);
                    } else {
                        let e = obs.user_entry(i, j - m);
                        user_feats.extend_from_slice(&[e[0] * cs, e[1] * cs, e[2] * config.aoi_scale]);
                        user_dst.push(base + i);
                    }
                }
            }
        }
        let pack = |feats: Vec<f64>, dst: Vec<usize>, width: usize| -> Result<Option<_>> {
            if dst.is_empty() {
                Ok(None)
            } else {
                Ok(Some((Tensor::new(vec![dst.len(), width], feats)?, Rc::new(dst))))
            }
        };
        Ok(Self {
            batch: observations.len(),
            num_uavs: m,
            num_users: n,
            uav_pairs: pack(uav_feats, uav_dst, 2)?,
            user_pairs: pack(user_feats, user_dst, 3)?,
            edges: block_diagonal_edges(observations, nodes),
            uav_nodes: Rc::new(uav_nodes),
            user_nodes: Rc::new(user_nodes),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.batch * (self.num_uavs + self.num_users)
    }
}

fn block_diagonal_edges(observations: &[&ObservationSet], nodes: usize) -> EdgeList {
    let mut dst = Vec::new();
    let mut src = Vec::new();
    let mut degree = vec![0.0; nodes * observations.len()];
    for (b, obs) in observations.iter().enumerate() {
        let base = b * nodes;
        for i in 0..nodes {
            for j in 0..nodes {
                if obs.adjacent(i, j) {
                    dst.push(base + i);
                    src.push(base + j);
                    degree[base + i] += 1.0;
                }
            }
        }
    }
    EdgeList {
        dst: Rc::new(dst),
        src: Rc::new(src),
        degree,
    }
}

/// Sum-pooled entity embeddings `[Σ relu(E_v(Δ)) ∥ Σ relu(E_u(Δ, a))]`.
#[derive(Clone, Debug)]
struct EntityPool {
    uav_embed: Linear,
    user_embed: Linear,
    width: usize,
}

impl EntityPool {
    fn forward(&self, g: &mut Graph, store: &ParamStore, input: &PolicyInput) -> Result<Var> {
        let total = input.num_nodes();
        let mut parts = Vec::with_capacity(2);
        for (pairs, embed) in [(&input.uav_pairs, &self.uav_embed), (&input.user_pairs, &self.user_embed)] {
            let pooled = match pairs {
                Some((feats, dst)) => {
                    let x = g.input(feats.clone());
                    let e = embed.forward(g, store, x)?;
                    let e = g.relu(e);
                    g.scatter_add_rows(e, dst.clone(), total)?
                }
                None => g.input(Tensor::zeros(&[total, self.width])),
            };
            parts.push(pooled);
        }
        g.concat_cols(&parts)
    }
}

/// `X'_i = Σ_{j∈N(i)} f(X_i ∥ X_j − X_i)` with `f` a shared two-layer
/// perceptron. The first affine layer is evaluated per node and combined
/// per edge; the second is applied after the neighbour sum, which is the
/// same map because it is affine (bias counted once per neighbour).
#[derive(Clone, Debug)]
pub struct EdgeConvLayer {
    w_self: ParamId,
    w_diff: ParamId,
    b_hidden: ParamId,
    output: Linear,
}

impl EdgeConvLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let fan_in = 2 * width;
        Self {
            w_self: store.add_uniform(format!("{name}/w_self"), &[width, hidden], fan_in, rng),
            w_diff: store.add_uniform(format!("{name}/w_diff"), &[width, hidden], fan_in, rng),
            b_hidden: store.add_uniform(format!("{name}/b_hidden"), &[hidden], fan_in, rng),
            output: Linear::new(store, &format!("{name}/out"), hidden, width, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, edges: &EdgeList) -> Result<Var> {
        let nodes = g.value(x).rows();
        let width = g.value(x).cols();
        if edges.num_nodes() != nodes {
            return Err(contract("edge list and feature rows disagree"));
        }
        if edges.is_empty() {
            return Ok(g.input(Tensor::zeros(&[nodes, width])));
        }
        let ws = g.param(store, self.w_self);
        let wd = g.param(store, self.w_diff);
        let b1 = g.param(store, self.b_hidden);
        // [X_i ∥ X_j − X_i]·[W_s; W_d] = X_i(W_s − W_d) + X_j W_d
        let u = g.matmul(x, ws)?;
        let v = g.matmul(x, wd)?;
        let own = g.sub(u, v)?;
        let own_e = g.gather_rows(own, edges.dst.clone())?;
        let nb_e = g.gather_rows(v, edges.src.clone())?;
        let pre = g.add(own_e, nb_e)?;
        let pre = g.add_row(pre, b1)?;
        let hid = g.relu(pre);
        let summed = g.scatter_add_rows(hid, edges.dst.clone(), nodes)?;
        let w2 = g.param(store, self.output.weight);
        let b2 = g.param(store, self.output.bias);
        let lin = g.matmul(summed, w2)?;
        let deg = g.input(Tensor::new(vec![nodes, 1], edges.degree.clone())?);
        let b2 = g.reshape(b2, vec![1, width])?;
        let bias = g.matmul(deg, b2)?;
        g.add(lin, bias)
    }
}

/// `X'_i = g(X_i ∥ Σ_{j∈N(i)} X_j)` with a shared two-layer perceptron.
#[derive(Clone, Debug)]
pub struct AggLayer {
    mlp: Mlp2,
}

impl AggLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp2::new(store, name, 2 * width, hidden, width, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, edges: &EdgeList) -> Result<Var> {
        let nodes = g.value(x).rows();
        let width = g.value(x).cols();
        if edges.num_nodes() != nodes {
            return Err(contract("edge list and feature rows disagree"));
        }
        let neighbour_sum = if edges.is_empty() {
            g.input(Tensor::zeros(&[nodes, width]))
        } else {
            let nb = g.gather_rows(x, edges.src.clone())?;
            g.scatter_add_rows(nb, edges.dst.clone(), nodes)?
        };
        let cat = g.concat_cols(&[x, neighbour_sum])?;
        self.mlp.forward(g, store, cat)
    }
}

#[derive(Clone, Debug)]
enum GraphLayer {
    EdgeConv(EdgeConvLayer),
    Agg(AggLayer),
}

impl GraphLayer {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, edges: &EdgeList) -> Result<Var> {
        match self {
            GraphLayer::EdgeConv(l) => l.forward(g, store, x, edges),
            GraphLayer::Agg(l) => l.forward(g, store, x, edges),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PolicyNetwork {
    pub config: EncoderConfig,
    pool: EntityPool,
    gru: GruCell,
    user_mlp: Mlp2,
    layers: Vec<GraphLayer>,
    head: Linear,
}

/// Output of one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PolicyOutput {
    /// `[batch·M × 8]` action values, UAV-major within each batch entry.
    pub q: Var,
    /// `[batch·M × h]` updated recurrent state.
    pub hidden: Var,
}

impl PolicyNetwork {
    /// Registers the policy parameters under `prefix` (e.g. `policy`).
    pub fn new(store: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let f = config.feature_width;
        let e = config.entity_width;
        let pool = EntityPool {
            uav_embed: Linear::new(store, &format!("{prefix}/pool_uav"), 2, e, rng),
            user_embed: Linear::new(store, &format!("{prefix}/pool_user"), 3, e, rng),
            width: e,
        };
        let gru = GruCell::new(store, &format!("{prefix}/gru"), 2 * e, config.recurrent_width, rng);
        let user_mlp = Mlp2::new(store, &format!("{prefix}/user_mlp"), 2 * e, f, f, rng);
        let layers = match config.variant {
            Variant::None => Vec::new(),
            Variant::EdgeConv => (0..config.graph_layers)
                .map(|l| {
                    GraphLayer::EdgeConv(EdgeConvLayer::new(
                        store,
                        &format!("{prefix}/edgeconv{l}"),
                        f,
                        config.graph_hidden_width,
                        rng,
                    ))
                })
                .collect(),
            Variant::Agg => (0..config.graph_layers)
                .map(|l| {
                    GraphLayer::Agg(AggLayer::new(
                        store,
                        &format!("{prefix}/agg{l}"),
                        f,
                        config.graph_hidden_width,
                        rng,
                    ))
                })
                .collect(),
        };
        let head = Linear::new(store, &format!("{prefix}/head"), f, NUM_DIRECTIONS, rng);
        Ok(Self {
            config,
            pool,
            gru,
            user_mlp,
            layers,
            head,
        })
    }

    pub fn hidden_width(&self) -> usize {
        self.config.recurrent_width
    }

    /// `Z^v` and the new hidden state for every UAV node: pooled own
    /// observation through the shared GRU.
    pub fn encode_uav_nodes(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        node_obs: Var,
        input: &PolicyInput,
        hidden: Var,
    ) -> Result<Var> {
        let expected = input.batch * input.num_uavs;
        if g.value(hidden).rows() != expected || g.value(hidden).cols() != self.hidden_width() {
            return Err(contract(format!(
                "hidden {:?}, expected [{expected}, {}]",
                g.value(hidden).shape(),
                self.hidden_width()
            )));
        }
        let rows = g.gather_rows(node_obs, input.uav_nodes.clone())?;
        self.gru.forward(g, store, rows, hidden)
    }

    /// `Z^u` for every user node via the shared perceptron.
    pub fn encode_user_nodes(&self, g: &mut Graph, store: &ParamStore, node_obs: Var, input: &PolicyInput) -> Result<Var> {
        let rows = g.gather_rows(node_obs, input.user_nodes.clone())?;
        self.user_mlp.forward(g, store, rows)
    }

    /// Pooled per-node observation encodings `[nodes × 2·entity_width]`.
    pub fn pool_observations(&self, g: &mut Graph, store: &ParamStore, input: &PolicyInput) -> Result<Var> {
        self.pool.forward(g, store, input)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &PolicyInput, hidden: Var) -> Result<PolicyOutput> {
        let total = input.num_nodes();
        let node_obs = self.pool.forward(g, store, input)?;
        let z_v = self.encode_uav_nodes(g, store, node_obs, input, hidden)?;
        let mut x = g.scatter_add_rows(z_v, input.uav_nodes.clone(), total)?;
        if input.num_users > 0 {
            let z_u = self.encode_user_nodes(g, store, node_obs, input)?;
            let users = g.scatter_add_rows(z_u, input.user_nodes.clone(), total)?;
            x = g.add(x, users)?;
        }
        for layer in &self.layers {
            let delta = layer.forward(g, store, x, &input.edges)?;
            x = g.add(x, delta)?;
        }
        let uav_feats = g.gather_rows(x, input.uav_nodes.clone())?;
        let q = self.head.forward(g, store, uav_feats)?;
        Ok(PolicyOutput { q, hidden: z_v })
    }

    /// Single-graph convenience: returns the `M × 8` Q matrix and the
    /// updated `M × h` hidden state.
    pub fn q_values(&self, store: &ParamStore, obs: &ObservationSet, hidden: &Tensor) -> Result<(Tensor, Tensor)> {
        let input = PolicyInput::build(&[obs], &self.config)?;
        let mut g = Graph::new();
        let h = g.input(hidden.clone());
        let out = self.forward(&mut g, store, &input, h)?;
        Ok((g.value(out.q).clone(), g.value(out.hidden).clone()))
    }

    pub fn zero_hidden(&self, num_uavs: usize) -> Tensor {
        Tensor::zeros(&[num_uavs, self.hidden_width()])
    }

    /// Episode-start hidden state: UAV `i` gets the unit vector `e_{i mod h}`.
    ///
    /// All UAVs take off from the same point, so with zero hiddens every
    /// UAV would see the same inputs and a greedy policy could never split
    /// them up. The code is state, not a parameter: it is relabelled along
    /// with the UAVs and the network stays equivariant.
    pub fn initial_hidden(&self, num_uavs: usize) -> Tensor {
        let h = self.hidden_width();
        let mut t = Tensor::zeros(&[num_uavs, h]);
        for i in 0..num_uavs {
            t.data_mut()[i * h + i % h] = 1.0;
        }
        t
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy per UAV: with probability `epsilon` a uniform direction,
/// otherwise the argmax of its Q row.
pub fn select_actions(q: &Tensor, epsilon: f64, rng: &mut impl Rng) -> JointAction {
    let rows = q.rows();
    let actions = (0..rows)
        .map(|r| {
            if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
                rng.gen_range(0..NUM_DIRECTIONS)
            } else {
                argmax(q.row(r))
            }
        })
        .collect();
    JointAction(actions)
}
