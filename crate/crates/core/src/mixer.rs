//! Monotonic, permutation-invariant mixing network.
//!
//! ```text
//! [W_in, b_in]   = Ψ_inner(s)
//! φ(q_i)         = relu(|W_in| q_i + b_in)          shared by every agent
//! [W_out, b_out] = Ψ_outer(s)
//! Q_tot          = |W_out| · Σ_i φ(q_i) + b_out
//! ```
//!
//! Non-negative weights and monotone activations make `Q_tot`
//! non-decreasing in every `q_i`; the sum makes it invariant to agent order.
//! The hypernetworks see only the global state, so the generated weights do
//! not depend on the Q-values they scale.

use std::cell::Cell;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::argmax;
use crate::env::NUM_DIRECTIONS;
use crate::error::{contract, Error, Result};
use crate::nn::{Graph, Mlp2, ParamStore, Tensor, Var};

thread_local! {
    static EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of mixer forward passes run on the current thread.
pub fn evaluation_count() -> u64 {
    EVALUATIONS.with(Cell::get)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub embed_width: usize,
    pub hypernet_width: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            embed_width: 32,
            hypernet_width: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MixerNetwork {
    pub config: MixerConfig,
    pub num_agents: usize,
    pub state_dim: usize,
    inner: Mlp2,
    outer: Mlp2,
}

impl MixerNetwork {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: MixerConfig,
        num_agents: usize,
        state_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.embed_width == 0 || config.hypernet_width == 0 {
            return Err(Error::Config {
                key: "embed_width".into(),
                reason: "mixer widths must be positive".into(),
            });
        }
        let e = config.embed_width;
        let h = config.hypernet_width;
        let inner = Mlp2::new(store, &format!("{prefix}/hyper_inner"), state_dim, h, 2 * e, rng);
        let outer = Mlp2::new(store, &format!("{prefix}/hyper_outer"), state_dim, h, e + 1, rng);
        Ok(Self {
            config,
            num_agents,
            state_dim,
            inner,
            outer,
        })
    }

    fn check_state(&self, g: &Graph, state: Var, batch: usize) -> Result<()> {
        let s = g.value(state);
        if s.rows() != batch || s.cols() != self.state_dim {
            return Err(contract(format!(
                "state {:?}, expected [{batch}, {}]",
                s.shape(),
                self.state_dim
            )));
        }
        Ok(())
    }

    /// `(|W_in|, b_in)` rows for a batch of states, each `[batch × embed]`.
    fn inner_weights(&self, g: &mut Graph, store: &ParamStore, state: Var) -> Result<(Var, Var)> {
        let e = self.config.embed_width;
        let out = self.inner.forward(g, store, state)?;
        let w = g.slice_cols(out, 0, e)?;
        let w = g.abs(w);
        let b = g.slice_cols(out, e, 2 * e)?;
        Ok((w, b))
    }

    /// `φ(q, s)` for one local value: `relu(|W_in(s)| q + b_in(s))`.
    pub fn inner_map(&self, store: &ParamStore, q: f64, state: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let s = g.input(state.clone().reshaped(vec![1, state.len()])?);
        self.check_state(&g, s, 1)?;
        let (w, b) = self.inner_weights(&mut g, store, s)?;
        let qv = g.input(Tensor::new(vec![1, 1], vec![q])?);
        let wq = g.mul_col(w, qv)?;
        let pre = g.add(wq, b)?;
        let out = g.relu(pre);
        Ok(g.value(out).clone())
    }

    /// Batched `Q_tot`: `q_locals` is `[batch × M]`, `state` `[batch × S]`;
    /// returns `[batch × 1]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q_locals: Var, state: Var) -> Result<Var> {
        EVALUATIONS.with(|c| c.set(c.get() + 1));
        let batch = g.value(q_locals).rows();
        let m = g.value(q_locals).cols();
        if m != self.num_agents {
            return Err(contract(format!(
                "{m} local values for a mixer over {} agents",
                self.num_agents
            )));
        }
        self.check_state(g, state, batch)?;
        let e = self.config.embed_width;

        let (w_in, b_in) = self.inner_weights(g, store, state)?;
        let owner: Rc<Vec<usize>> = Rc::new((0..batch * m).map(|r| r / m).collect());
        let w_rows = g.gather_rows(w_in, owner.clone())?;
        let b_rows = g.gather_rows(b_in, owner.clone())?;
        let q_col = g.reshape(q_locals, vec![batch * m, 1])?;
        let wq = g.mul_col(w_rows, q_col)?;
        let pre = g.add(wq, b_rows)?;
        let feats = g.relu(pre);
        let pooled = g.scatter_add_rows(feats, owner, batch)?;

        let out = self.outer.forward(g, store, state)?;
        let w_out = g.slice_cols(out, 0, e)?;
        let w_out = g.abs(w_out);
        let b_out = g.slice_cols(out, e, e + 1)?;
        let weighted = g.mul(w_out, pooled)?;
        let dot = g.row_sum(weighted);
        g.add(dot, b_out)
    }

    /// Single-state convenience returning the scalar `Q_tot`.
    pub fn mix(&self, store: &ParamStore, q_locals: &[f64], state: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let q = g.input(Tensor::new(vec![1, q_locals.len()], q_locals.to_vec())?);
        let s = g.input(state.clone().reshaped(vec![1, state.len()])?);
        let out = self.forward(&mut g, store, q, s)?;
        Ok(g.scalar(out))
    }

    /// `Q_tot` for many joint choices of local values sharing one state.
    pub fn mix_many(&self, store: &ParamStore, rows: &[Vec<f64>], state: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let q = g.input(Tensor::from_rows(rows)?);
        let s_rows: Vec<Vec<f64>> = vec![state.data().to_vec(); rows.len()];
        let s = g.input(Tensor::from_rows(&s_rows)?);
        let out = self.forward(&mut g, store, q, s)?;
        Ok(g.value(out).data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    /// Per-agent argmax directions.
    pub greedy: Vec<usize>,
    pub greedy_value: f64,
    /// First maximiser found by exhaustive enumeration.
    pub best: Vec<usize>,
    pub best_value: f64,
    /// True when the per-agent greedy tuple attains the joint maximum.
    pub consistent: bool,
}

/// Enumerates all `8^M` joint actions and compares the joint maximiser of
/// `Q_tot` with the tuple of per-agent argmaxes.
pub fn argmax_consistency_check(
    q: &Tensor,
    mixer: &MixerNetwork,
    store: &ParamStore,
    state: &Tensor,
) -> Result<ConsistencyReport> {
    let m = q.rows();
    if q.cols() != NUM_DIRECTIONS || m != mixer.num_agents {
        return Err(contract(format!("Q matrix {:?} for {} agents", q.shape(), mixer.num_agents)));
    }
    if m > 4 {
        return Err(contract("joint action space too large to enumerate"));
    }
    let total = NUM_DIRECTIONS.pow(m as u32);
    let tuples: Vec<Vec<usize>> = (0..total)
        .map(|mut code| {
            (0..m)
                .map(|_| {
                    let a = code % NUM_DIRECTIONS;
                    code /= NUM_DIRECTIONS;
                    a
                })
                .collect()
        })
        .collect();
    let rows: Vec<Vec<f64>> = tuples
        .iter()
        .map(|t| t.iter().enumerate().map(|(i, &a)| q.get2(i, a)).collect())
        .collect();
    let values = mixer.mix_many(store, &rows, state)?;
    let best_idx = argmax(&values);
    let greedy: Vec<usize> = (0..m).map(|i| argmax(q.row(i))).collect();
    let greedy_code = greedy.iter().rev().fold(0, |acc, &a| acc * NUM_DIRECTIONS + a);
    let greedy_value = values[greedy_code];
    let best_value = values[best_idx];
    Ok(ConsistencyReport {
        consistent: greedy_value >= best_value,
        greedy,
        greedy_value,
        best: tuples[best_idx].clone(),
        best_value,
    })
}
