//! Invariants of the environment, encoder and mixer as property tests.

mod common;

use common::{oracle_rollout, random_adjacency, random_tensor, rng, scrambled_state, tiny_encoder};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use skyaoi_core::encoder::{EdgeConvLayer, EdgeList, PolicyInput};
use skyaoi_core::env::{build_observations, is_covered, reset, step};
use skyaoi_core::*;

fn world(m: usize, n: usize, d_xi: f64) -> WorldConfig {
    WorldConfig {
        num_uavs: m,
        num_users: n,
        detection_range: d_xi * 0.04,
        ..WorldConfig::default()
    }
}

fn mixer_instance(seed: u64, m: usize) -> (ParamStore, MixerNetwork, Tensor) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let sd = 2 * m + 3 * 2 * m;
    let mixer = MixerNetwork::new(&mut store, "mixer", MixerConfig::default(), m, sd, &mut r).unwrap();
    let state = Tensor::vector((0..sd).map(|_| r.gen_range(0.0..1.0)).collect());
    (store, mixer, state)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn env_matches_reference_dynamics(seed in any::<u64>(), m in 1usize..4, extra in 0usize..4, slots in 1usize..40) {
        let cfg = WorldConfig { horizon: slots, ..world(m, m + extra, 7.0) };
        let mut r = rng(seed);
        let mut st = reset(&cfg, seed);
        let users = st.user_positions.clone();
        let actions: Vec<Vec<usize>> = (0..slots).map(|_| (0..m).map(|_| r.gen_range(0..8)).collect()).collect();
        let oracle = oracle_rollout(cfg.area_side, cfg.speed, cfg.transmission_range, cfg.uav_start, m, &users, &actions);
        for (k, a) in actions.iter().enumerate() {
            let out = step(&mut st, &JointAction(a.clone()), &cfg).unwrap();
            prop_assert_eq!(&st.aoi, &oracle.aoi[k]);
            prop_assert_eq!(out.reward, oracle.rewards[k]);
            for (p, q) in st.uav_positions.iter().zip(&oracle.uavs[k]) {
                prop_assert!((p.0 - q.0).abs() < 1e-12 && (p.1 - q.1).abs() < 1e-12);
            }
            prop_assert_eq!(out.done, k + 1 == slots);
        }
    }

    #[test]
    fn env_step_invariants(seed in any::<u64>(), m in 1usize..4, extra in 0usize..5) {
        let cfg = world(m, m + extra, 7.0);
        let mut r = rng(seed);
        let mut st = reset(&cfg, seed);
        for _ in 0..30 {
            let before = st.aoi.clone();
            let a = JointAction((0..m).map(|_| r.gen_range(0..8)).collect());
            let out = step(&mut st, &a, &cfg).unwrap();
            let total: u32 = st.aoi.iter().sum();
            prop_assert_eq!(out.reward, -(total as f64));
            for i in 0..st.aoi.len() {
                prop_assert!(st.aoi[i] == 0 || st.aoi[i] == before[i] + 1);
                prop_assert_eq!(st.aoi[i] == 0, is_covered(&st, i, &cfg));
                prop_assert!(st.aoi[i] as usize <= st.slot);
            }
            for &(x, y) in &st.uav_positions {
                prop_assert!((0.0..=cfg.area_side).contains(&x) && (0.0..=cfg.area_side).contains(&y));
            }
        }
    }

    #[test]
    fn observations_are_symmetric_and_masked(seed in any::<u64>(), m in 1usize..4, extra in 0usize..5, d in 3.0f64..12.0) {
        let cfg = world(m, m + extra, d);
        let st = scrambled_state(&cfg, &mut rng(seed), 15);
        let obs = build_observations(&st, &cfg);
        let nodes = obs.num_nodes();
        for i in 0..nodes {
            prop_assert!(!obs.adjacent(i, i));
            for j in 0..nodes {
                prop_assert_eq!(obs.adjacent(i, j), obs.adjacent(j, i));
                let (pi, pj) = (st.position(i), st.position(j));
                let d2 = (pi.0 - pj.0).powi(2) + (pi.1 - pj.1).powi(2);
                prop_assert_eq!(obs.adjacent(i, j), i != j && d2 <= cfg.detection_range.powi(2));
                if !obs.adjacent(i, j) {
                    if j < m {
                        prop_assert_eq!(obs.uav_entry(i, j), [0.0; 2]);
                    } else {
                        prop_assert_eq!(obs.user_entry(i, j - m), [0.0; 3]);
                    }
                }
            }
        }
    }

    #[test]
    fn relabelled_uavs_fly_the_same_trajectories(seed in any::<u64>(), m in 2usize..5) {
        let cfg = world(m, 5, 7.0);
        let mut r = rng(seed);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut r);
        let mut a = reset(&cfg, seed);
        let mut b = a.clone();
        for _ in 0..20 {
            let dirs: Vec<usize> = (0..m).map(|_| r.gen_range(0..8)).collect();
            let permuted: Vec<usize> = perm.iter().map(|&p| dirs[p]).collect();
            let ra = step(&mut a, &JointAction(dirs), &cfg).unwrap();
            let rb = step(&mut b, &JointAction(permuted), &cfg).unwrap();
            prop_assert_eq!(ra.reward, rb.reward);
            let mut pa = a.uav_positions.clone();
            let mut pb = b.uav_positions.clone();
            pa.sort_by(|x, y| x.partial_cmp(y).unwrap());
            pb.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assert_eq!(pa, pb);
        }
    }

    #[test]
    fn mixer_is_monotone(seed in any::<u64>(), m in 1usize..5, agent in 0usize..4, delta in 1e-6f64..5.0) {
        let agent = agent % m;
        let (store, mixer, state) = mixer_instance(seed, m);
        let mut r = rng(seed ^ 0xA5);
        let q: Vec<f64> = (0..m).map(|_| r.gen_range(-5.0..5.0)).collect();
        let mut up = q.clone();
        up[agent] += delta;
        let base = mixer.mix(&store, &q, &state).unwrap();
        prop_assert!(mixer.mix(&store, &up, &state).unwrap() >= base);
    }

    #[test]
    fn mixer_ignores_agent_order(seed in any::<u64>(), m in 2usize..5) {
        let (store, mixer, state) = mixer_instance(seed, m);
        let mut r = rng(seed ^ 0x5A);
        let q: Vec<f64> = (0..m).map(|_| r.gen_range(-5.0..5.0)).collect();
        let mut p = q.clone();
        p.shuffle(&mut r);
        let a = mixer.mix(&store, &q, &state).unwrap();
        let b = mixer.mix(&store, &p, &state).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn encoder_is_equivariant(seed in any::<u64>(), m in 2usize..5, variant in 0usize..3) {
        let variant = [Variant::EdgeConv, Variant::Agg, Variant::None][variant];
        let cfg = world(m, 4, 9.0);
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let net = PolicyNetwork::new(&mut store, "policy", tiny_encoder(&cfg, variant), &mut r).unwrap();
        let obs = build_observations(&scrambled_state(&cfg, &mut r, 12), &cfg);
        let hidden = random_tensor(&mut r, &[m, 4], 1.0);
        let mut uav_perm: Vec<usize> = (0..m).collect();
        uav_perm.shuffle(&mut r);
        let perm: Vec<usize> = uav_perm.iter().copied().chain(m..m + 4).collect();
        let hp = Tensor::from_rows(&uav_perm.iter().map(|&i| hidden.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let (q, h) = net.q_values(&store, &obs, &hidden).unwrap();
        let (qp, hpo) = net.q_values(&store, &obs.permuted(&perm), &hp).unwrap();
        for (k, &i) in uav_perm.iter().enumerate() {
            for c in 0..8 {
                prop_assert!((qp.get2(k, c) - q.get2(i, c)).abs() <= 1e-9);
            }
            for c in 0..4 {
                prop_assert!((hpo.get2(k, c) - h.get2(i, c)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn edgeconv_ignores_neighbour_order(seed in any::<u64>(), nodes in 2usize..8) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let layer = EdgeConvLayer::new(&mut store, "ec", 5, 7, &mut r);
        let x = random_tensor(&mut r, &[nodes, 5], 1.0);
        let adj = random_adjacency(&mut r, nodes, 0.6);
        let edges = EdgeList::from_adjacency(nodes, &adj);
        let mut order: Vec<usize> = (0..edges.len()).collect();
        order.shuffle(&mut r);
        let shuffled = EdgeList {
            dst: std::rc::Rc::new(order.iter().map(|&e| edges.dst[e]).collect()),
            src: std::rc::Rc::new(order.iter().map(|&e| edges.src[e]).collect()),
            degree: edges.degree.clone(),
        };
        let run = |e: &EdgeList| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let out = layer.forward(&mut g, &store, xv, e).unwrap();
            g.value(out).clone()
        };
        prop_assert!(run(&edges).max_abs_diff(&run(&shuffled)) <= 1e-9);
    }

    #[test]
    fn uav_rows_ignore_nodes_beyond_two_hops(seed in any::<u64>(), variant in 0usize..3) {
        let variant = [Variant::EdgeConv, Variant::Agg, Variant::None][variant];
        let cfg = world(3, 7, 5.0);
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let net = PolicyNetwork::new(&mut store, "policy", tiny_encoder(&cfg, variant), &mut r).unwrap();
        let obs = build_observations(&scrambled_state(&cfg, &mut r, 25), &cfg);
        let hidden = random_tensor(&mut r, &[3, 4], 1.0);
        let (q, _) = net.q_values(&store, &obs, &hidden).unwrap();
        let hops = if variant == Variant::None { 0 } else { 2 };
        for uav in 0..3 {
            // Nodes within `hops` message-passing steps of `uav`.
            let mut reach = vec![false; 10];
            reach[uav] = true;
            for _ in 0..hops {
                let cur = reach.clone();
                for i in 0..10 {
                    if cur[i] {
                        for j in obs.neighbors(i) {
                            reach[j] = true;
                        }
                    }
                }
            }
            let mut scrambled = obs.clone();
            let mut h2 = hidden.clone();
            for node in (0..10).filter(|&i| !reach[i]) {
                for v in 0..3 {
                    let o = (node * 3 + v) * 2;
                    scrambled.uav_obs[o] = r.gen_range(-0.2..0.2);
                    scrambled.uav_obs[o + 1] = r.gen_range(-0.2..0.2);
                }
                for u in 0..7 {
                    let o = (node * 7 + u) * 3;
                    scrambled.user_obs[o + 2] = r.gen_range(0.0..50.0);
                }
                if node < 3 {
                    for c in 0..4 {
                        h2.data_mut()[node * 4 + c] = r.gen_range(-1.0..1.0);
                    }
                }
            }
            let (q2, _) = net.q_values(&store, &scrambled, &h2).unwrap();
            prop_assert_eq!(q.row(uav), q2.row(uav));
        }
    }

    #[test]
    fn outputs_depend_only_on_the_past(seed in any::<u64>()) {
        let cfg = world(2, 4, 7.0);
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let net = PolicyNetwork::new(&mut store, "policy", tiny_encoder(&cfg, Variant::EdgeConv), &mut r).unwrap();
        let seq: Vec<ObservationSet> = (0..6).map(|k| build_observations(&scrambled_state(&cfg, &mut r, 3 + k), &cfg)).collect();
        let cut = r.gen_range(1..6);
        let mut altered = seq.clone();
        for o in &mut altered[cut..] {
            *o = build_observations(&scrambled_state(&cfg, &mut r, 9), &cfg);
        }
        let roll = |s: &[ObservationSet]| {
            let mut h = net.initial_hidden(2);
            s.iter()
                .map(|o| {
                    let (q, h2) = net.q_values(&store, o, &h).unwrap();
                    h = h2;
                    q
                })
                .collect::<Vec<_>>()
        };
        let a = roll(&seq);
        let b = roll(&altered);
        prop_assert_eq!(&a[..cut], &b[..cut]);
    }
}

#[test]
fn batched_forward_matches_single_graphs() {
    let cfg = world(3, 5, 7.0);
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let net = PolicyNetwork::new(&mut store, "policy", tiny_encoder(&cfg, Variant::EdgeConv), &mut r).unwrap();
    let obs: Vec<ObservationSet> = (0..4).map(|k| build_observations(&scrambled_state(&cfg, &mut r, 5 + 3 * k), &cfg)).collect();
    let hidden: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut r, &[3, 4], 1.0)).collect();
    let refs: Vec<&ObservationSet> = obs.iter().collect();
    let input = PolicyInput::build(&refs, &net.config).unwrap();
    let stacked = Tensor::new(vec![12, 4], hidden.iter().flat_map(|h| h.data().to_vec()).collect()).unwrap();
    let mut g = Graph::new();
    let h = g.input(stacked);
    let out = net.forward(&mut g, &store, &input, h).unwrap();
    let q = g.value(out.q);
    for b in 0..4 {
        let (single, _) = net.q_values(&store, &obs[b], &hidden[b]).unwrap();
        for i in 0..3 {
            for c in 0..8 {
                assert!((q.get2(b * 3 + i, c) - single.get2(i, c)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn edgeconv_matches_per_edge_definition() {
    // Brute-force X'_i = Σ_j W2·relu(W1·[X_i ∥ X_j − X_i] + b1) + b2.
    let mut r = rng(11);
    let nodes = 6;
    let (w, hdim) = (3, 5);
    let mut store = ParamStore::new();
    let layer = EdgeConvLayer::new(&mut store, "ec", w, hdim, &mut r);
    let x = random_tensor(&mut r, &[nodes, w], 1.0);
    let adj = random_adjacency(&mut r, nodes, 0.5);
    let edges = EdgeList::from_adjacency(nodes, &adj);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = layer.forward(&mut g, &store, xv, &edges).unwrap();
    let fast = g.value(out).clone();

    let p = |name: &str| store.value(store.find(name).unwrap()).clone();
    let (ws, wd, b1, w2, b2) = (p("ec/w_self"), p("ec/w_diff"), p("ec/b_hidden"), p("ec/out/w"), p("ec/out/b"));
    for i in 0..nodes {
        let mut acc = vec![0.0; w];
        for j in (0..nodes).filter(|&j| adj[i * nodes + j] == 1) {
            let mut hid = b1.data().to_vec();
            for (k, hk) in hid.iter_mut().enumerate() {
                for c in 0..w {
                    *hk += x.get2(i, c) * ws.get2(c, k) + (x.get2(j, c) - x.get2(i, c)) * wd.get2(c, k);
                }
                *hk = hk.max(0.0);
            }
            for (o, a) in acc.iter_mut().enumerate() {
                *a += b2.data()[o] + (0..hdim).map(|k| hid[k] * w2.get2(k, o)).sum::<f64>();
            }
        }
        for o in 0..w {
            assert!((fast.get2(i, o) - acc[o]).abs() < 1e-12, "node {i}");
        }
    }
}
