use rand::Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;

/// Affine map `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}/w"), &[in_dim, out_dim], in_dim, rng);
        let bias = store.add_uniform(format!("{name}/b"), &[out_dim], in_dim, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

/// Two affine layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}/l1"), in_dim, hidden_dim, rng),
            output: Linear::new(store, &format!("{name}/l2"), hidden_dim, out_dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        self.output.forward(g, store, h)
    }
}

/// Gated recurrent unit.
///
/// ```text
/// z  = σ([x, h] W_z + b_z)
/// r  = σ([x, h] W_r + b_r)
/// n  = tanh([x, r ⊙ h] W_n + b_n)
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub update: Linear,
    pub reset: Linear,
    pub candidate: Linear,
    pub in_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let cat = in_dim + hidden_dim;
        Self {
            update: Linear::new(store, &format!("{name}/z"), cat, hidden_dim, rng),
            reset: Linear::new(store, &format!("{name}/r"), cat, hidden_dim, rng),
            candidate: Linear::new(store, &format!("{name}/n"), cat, hidden_dim, rng),
            in_dim,
            hidden_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        if g.value(x).cols() != self.in_dim
            || g.value(h).cols() != self.hidden_dim
            || g.value(x).rows() != g.value(h).rows()
        {
            return Err(crate::error::contract(format!(
                "gru input {:?} / hidden {:?} vs in={} h={}",
                g.value(x).shape(),
                g.value(h).shape(),
                self.in_dim,
                self.hidden_dim
            )));
        }
        let xh = g.concat_cols(&[x, h])?;
        let z = self.update.forward(g, store, xh)?;
        let z = g.sigmoid(z);
        let r = self.reset.forward(g, store, xh)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let xrh = g.concat_cols(&[x, rh])?;
        let n = self.candidate.forward(g, store, xrh)?;
        let n = g.tanh(n);
        let keep = g.mul(z, h)?;
        let one_minus_z = g.one_minus(z);
        let fresh = g.mul(one_minus_z, n)?;
        g.add(fresh, keep)
    }
}
