//! Oracles shared by the integration tests.
#![allow(dead_code)]

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skyaoi_core::encoder::{EdgeConvLayer, EdgeList, PolicyInput};
use skyaoi_core::env::{build_observations, global_state_vector, reset, WorldState};
use skyaoi_core::nn::gradcheck::{max_relative_error, DEFAULT_STEP};
use skyaoi_core::nn::{GruCell, Linear, ParamId};
use skyaoi_core::*;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Random symmetric 0/1 adjacency without self-loops.
pub fn random_adjacency(rng: &mut impl Rng, nodes: usize, p: f64) -> Vec<u8> {
    let mut a = vec![0u8; nodes * nodes];
    for i in 0..nodes {
        for j in i + 1..nodes {
            if rng.gen_bool(p) {
                a[i * nodes + j] = 1;
                a[j * nodes + i] = 1;
            }
        }
    }
    a
}

/// Instances whose ReLU/abs inputs come closer than this to zero are not
/// differentiable at the finite-difference resolution and are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;

/// Builds `loss = Σ out ⊙ C` for a fixed random `C`, backpropagates, and
/// compares every gradient of `ids` with central differences. `None` when
/// the instance sits within [`KINK_MARGIN`] of a kink.
pub fn check_gradients(
    store: &mut ParamStore,
    ids: &[ParamId],
    coeff_seed: u64,
    forward: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> Option<f64> {
    let coeff = {
        let mut g = Graph::new();
        let out = forward(&mut g, store);
        random_tensor(&mut rng(coeff_seed), g.value(out).shape(), 1.0)
    };
    let loss_of = |g: &mut Graph, s: &ParamStore| {
        let out = forward(g, s);
        let c = g.input(coeff.clone());
        let prod = g.mul(out, c).unwrap();
        g.sum(prod)
    };
    store.zero_grad();
    let mut g = Graph::new();
    let loss = loss_of(&mut g, store);
    if g.nearest_kink() < KINK_MARGIN {
        return None;
    }
    g.backward(loss, store).unwrap();
    Some(max_relative_error(store, ids, DEFAULT_STEP, |s| {
        let mut g = Graph::new();
        let l = loss_of(&mut g, s);
        g.scalar(l)
    }))
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

pub fn grad_linear(seed: u64) -> Option<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 5, 4, &mut r);
    let x = store.add("x", random_tensor(&mut r, &[3, 5], 1.0));
    let ids = all_ids(&store);
    check_gradients(&mut store, &ids, seed, |g, s| {
        let xv = g.param(s, x);
        lin.forward(g, s, xv).unwrap()
    })
}

pub fn grad_relu(seed: u64) -> Option<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let x = store.add("x", random_tensor(&mut r, &[4, 6], 1.0));
    check_gradients(&mut store, &[x], seed, |g, s| {
        let xv = g.param(s, x);
        g.relu(xv)
    })
}

pub fn grad_abs(seed: u64) -> Option<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let x = store.add("x", random_tensor(&mut r, &[4, 6], 1.0));
    check_gradients(&mut store, &[x], seed, |g, s| {
        let xv = g.param(s, x);
        g.abs(xv)
    })
}

pub fn grad_gru(seed: u64) -> Option<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", 3, 4, &mut r);
    let x = store.add("x", random_tensor(&mut r, &[2, 3], 1.0));
    let h = store.add("h", random_tensor(&mut r, &[2, 4], 1.0));
    let ids = all_ids(&store);
    check_gradients(&mut store, &ids, seed, |g, s| {
        let xv = g.param(s, x);
        let hv = g.param(s, h);
        cell.forward(g, s, xv, hv).unwrap()
    })
}

pub fn grad_edgeconv(seed: u64) -> Option<f64> {
    let mut r = rng(seed);
    let nodes = 5;
    let mut store = ParamStore::new();
    let layer = EdgeConvLayer::new(&mut store, "ec", 4, 6, &mut r);
    let x = store.add("x", random_tensor(&mut r, &[nodes, 4], 1.0));
    let mut adj = random_adjacency(&mut r, nodes, 0.5);
    // Keep at least one edge so the layer is exercised.
    adj[1] = 1;
    adj[nodes] = 1;
    let edges = EdgeList::from_adjacency(nodes, &adj);
    let ids = all_ids(&store);
    check_gradients(&mut store, &ids, seed, |g, s| {
        let xv = g.param(s, x);
        layer.forward(g, s, xv, &edges).unwrap()
    })
}

pub fn grad_mixer(seed: u64) -> Option<f64> {
    let mut r = rng(seed);
    let (m, sd, b) = (3, 7, 4);
    let mut store = ParamStore::new();
    let cfg = MixerConfig {
        embed_width: 5,
        hypernet_width: 6,
    };
    let mixer = MixerNetwork::new(&mut store, "mixer", cfg, m, sd, &mut r).unwrap();
    let q = store.add("q", random_tensor(&mut r, &[b, m], 2.0));
    let state = random_tensor(&mut r, &[b, sd], 1.0);
    let ids = all_ids(&store);
    check_gradients(&mut store, &ids, seed, |g, s| {
        let qv = g.param(s, q);
        let sv = g.input(state.clone());
        mixer.forward(g, s, qv, sv).unwrap()
    })
}

pub fn tiny_world(seed: u64) -> WorldConfig {
    WorldConfig {
        num_uavs: 2,
        num_users: 3,
        user_placement_seed: seed,
        ..WorldConfig::default()
    }
}

pub fn tiny_encoder(world: &WorldConfig, variant: Variant) -> EncoderConfig {
    EncoderConfig {
        feature_width: 4,
        recurrent_width: 4,
        entity_width: 3,
        graph_hidden_width: 4,
        ..EncoderConfig::for_world(world, variant)
    }
}

/// A world state after a few random moves, so entities are spread out and
/// some pairs fall inside the detection range.
pub fn scrambled_state(world: &WorldConfig, r: &mut impl Rng, slots: usize) -> WorldState {
    let mut st = reset(world, r.gen());
    for _ in 0..slots {
        let a = JointAction((0..world.num_uavs).map(|_| r.gen_range(0..8)).collect());
        skyaoi_core::env::step(&mut st, &a, world).unwrap();
    }
    st
}

/// Squared TD error of the full policy + mixer on a batch of two states.
pub fn grad_composite(seed: u64) -> Option<f64> {
    let mut r = rng(seed);
    let world = WorldConfig {
        detection_range: 0.6,
        ..tiny_world(seed)
    };
    let mut store = ParamStore::new();
    let policy = PolicyNetwork::new(&mut store, "policy", tiny_encoder(&world, Variant::EdgeConv), &mut r).unwrap();
    let mixer = MixerNetwork::new(
        &mut store,
        "mixer",
        MixerConfig {
            embed_width: 3,
            hypernet_width: 4,
        },
        world.num_uavs,
        world.state_dim(),
        &mut r,
    )
    .unwrap();
    let states: Vec<WorldState> = (0..2).map(|_| scrambled_state(&world, &mut r, 10)).collect();
    let obs: Vec<ObservationSet> = states.iter().map(|s| build_observations(s, &world)).collect();
    let obs_refs: Vec<&ObservationSet> = obs.iter().collect();
    let input = PolicyInput::build(&obs_refs, &policy.config).unwrap();
    let gstate: Vec<Vec<f64>> = states.iter().map(|s| global_state_vector(s, &world).data().to_vec()).collect();
    let gstate = Tensor::from_rows(&gstate).unwrap();
    let hidden = random_tensor(&mut r, &[4, 4], 0.5);
    let actions: Rc<Vec<usize>> = Rc::new((0..4).map(|_| r.gen_range(0..8)).collect());
    let y = random_tensor(&mut r, &[2, 1], 1.0);
    let ids = all_ids(&store);
    check_gradients(&mut store, &ids, seed, |g, s| {
        let h = g.input(hidden.clone());
        let out = policy.forward(g, s, &input, h).unwrap();
        let chosen = g.pick(out.q, actions.clone()).unwrap();
        let q = g.reshape(chosen, vec![2, 2]).unwrap();
        let sv = g.input(gstate.clone());
        let qt = mixer.forward(g, s, q, sv).unwrap();
        let yv = g.input(y.clone());
        let d = g.sub(qt, yv).unwrap();
        let sq = g.square(d);
        g.mean(sq)
    })
}

pub type GradCase = (&'static str, fn(u64) -> Option<f64>);

pub const GRAD_CASES: [GradCase; 7] = [
    ("linear", grad_linear),
    ("relu", grad_relu),
    ("abs", grad_abs),
    ("gru", grad_gru),
    ("edgeconv", grad_edgeconv),
    ("hypernetwork mixer", grad_mixer),
    ("policy+mixer composite", grad_composite),
];

/// Worst relative error over `instances` accepted random instances, and the
/// number of near-kink draws that were skipped on the way.
pub fn worst_gradient_error(case: fn(u64) -> Option<f64>, instances: usize) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut accepted = 0;
    let mut seed = 0;
    while accepted < instances {
        if let Some(e) = case(seed) {
            worst = worst.max(e);
            accepted += 1;
        }
        seed += 1;
    }
    (worst, seed as usize - instances)
}

/// Straight-line reference dynamics: positions, ages and reward per slot
/// written out with plain loops and no shared code with the env module.
pub struct OracleTrace {
    pub aoi: Vec<Vec<u32>>,
    pub rewards: Vec<f64>,
    pub uavs: Vec<Vec<(f64, f64)>>,
}

pub fn oracle_rollout(
    side: f64,
    speed: f64,
    t: f64,
    start: (f64, f64),
    m: usize,
    users: &[(f64, f64)],
    actions: &[Vec<usize>],
) -> OracleTrace {
    let mut ux = vec![start.0; m];
    let mut uy = vec![start.1; m];
    let mut aoi = vec![0u32; users.len()];
    let mut trace = OracleTrace {
        aoi: Vec::new(),
        rewards: Vec::new(),
        uavs: Vec::new(),
    };
    for joint in actions {
        for j in 0..m {
            let deg = 45.0 * joint[j] as f64;
            let rad = deg * std::f64::consts::PI / 180.0;
            ux[j] += speed * rad.cos();
            uy[j] += speed * rad.sin();
            if ux[j] < 0.0 {
                ux[j] = 0.0;
            }
            if ux[j] > side {
                ux[j] = side;
            }
            if uy[j] < 0.0 {
                uy[j] = 0.0;
            }
            if uy[j] > side {
                uy[j] = side;
            }
        }
        let mut reward = 0.0;
        for (i, &(px, py)) in users.iter().enumerate() {
            let mut covered = false;
            for j in 0..m {
                let dx = ux[j] - px;
                let dy = uy[j] - py;
                if dx * dx + dy * dy <= t * t {
                    covered = true;
                }
            }
            if covered {
                aoi[i] = 0;
            } else {
                aoi[i] += 1;
            }
            reward -= aoi[i] as f64;
        }
        trace.aoi.push(aoi.clone());
        trace.rewards.push(reward);
        trace.uavs.push(ux.iter().copied().zip(uy.iter().copied()).collect());
    }
    trace
}

/// Monte-Carlo mean AoI of the uniform random policy on a fixed layout,
/// using the reference dynamics above.
pub fn random_walk_mean_aoi(world: &WorldConfig, episodes: usize, seed: u64) -> f64 {
    let users = reset(world, world.user_placement_seed).user_positions;
    let mut r = rng(seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        let actions: Vec<Vec<usize>> = (0..world.horizon)
            .map(|_| (0..world.num_uavs).map(|_| r.gen_range(0..8)).collect())
            .collect();
        let tr = oracle_rollout(
            world.area_side,
            world.speed,
            world.transmission_range,
            world.uav_start,
            world.num_uavs,
            &users,
            &actions,
        );
        total += tr.aoi.iter().flatten().map(|&a| a as f64).sum::<f64>();
    }
    total / (episodes * world.horizon * world.num_users) as f64
}
