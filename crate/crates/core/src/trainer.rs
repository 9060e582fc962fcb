//! Centralized training with decentralized execution.
//!
//! Episodes are collected with ε-greedy exploration and stored transition
//! by transition, together with the recurrent hidden states that were fed
//! to the policy, so any single transition can be replayed exactly. The
//! policy and the mixer live in one [`ParamStore`] (`policy/…` and
//! `mixer/…` names) and are optimised jointly on the squared TD error
//! against a periodically synchronised frozen copy.

use std::collections::VecDeque;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{select_actions, EncoderConfig, PolicyInput, PolicyNetwork};
use crate::env::{trajectory_rows, JointAction, ObservationSet, TrajectoryRow, World, WorldConfig, NUM_DIRECTIONS};
use crate::error::{contract, Error, Result};
use crate::mixer::{MixerConfig, MixerNetwork};
use crate::nn::{clip_grad_norm, AdamConfig, AdamState, Checkpoint, Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Adam's denominator floor.
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub epsilon: f64,
    /// Gradient steps between target-network copies.
    pub target_sync_period: u64,
    pub total_episodes: usize,
    /// Episodes collected before the first gradient step.
    pub warmup_episodes: usize,
    pub train_steps_per_episode: usize,
    pub buffer_capacity: usize,
    /// Multiplies the per-user reward inside the TD target.
    pub reward_scale: f64,
    /// Added to the per-user reward before scaling. Episodes have a fixed
    /// length, so this shifts all action values of a slot equally.
    pub reward_offset: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip: f64,
    /// Checkpoint every this many episodes; `0` keeps only the final one.
    pub checkpoint_interval: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            adam_epsilon: 1e-8,
            batch_size: 128,
            gamma: 0.99,
            epsilon: 0.05,
            target_sync_period: 200,
            total_episodes: 1000,
            warmup_episodes: 10,
            train_steps_per_episode: 1,
            buffer_capacity: 5000,
            reward_scale: 1.0,
            reward_offset: 0.0,
            grad_clip: 10.0,
            checkpoint_interval: 0,
            eval_interval: 0,
            eval_episodes: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon", "must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.batch_size > self.buffer_capacity {
            return bad("batch_size", "must be positive and at most buffer_capacity");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon", "must be positive");
        }
        if self.target_sync_period == 0 {
            return bad("target_sync_period", "must be positive");
        }
        if !self.reward_offset.is_finite() {
            return bad("reward_offset", "must be finite");
        }
        if !(self.reward_scale > 0.0) {
            return bad("reward_scale", "must be positive");
        }
        if self.grad_clip < 0.0 {
            return bad("grad_clip", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: ObservationSet,
    /// `M × h` hidden state fed to the policy at this slot.
    pub hidden: Tensor,
    pub action: JointAction,
    pub reward: f64,
    pub next_obs: ObservationSet,
    /// Hidden state produced at this slot, fed at the next one.
    pub next_hidden: Tensor,
    pub state: Tensor,
    pub next_state: Tensor,
    pub terminal: bool,
}

/// Fixed-capacity FIFO of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Uniform sample without replacement; `None` when too few transitions.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Option<Vec<&Transition>> {
        if batch > self.items.len() || batch == 0 {
            return None;
        }
        Some(sample(rng, self.items.len(), batch).into_iter().map(|i| &self.items[i]).collect())
    }
}

/// Outcome of one collected episode.
#[derive(Clone, Debug)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    /// `Σ_k r_k` of the raw environment rewards.
    pub total_return: f64,
    /// `(1 / (K·N)) Σ_k Σ_i a_i^k` over the post-update ages.
    pub mean_aoi: f64,
}

fn batched_hidden(hiddens: &[&Tensor]) -> Result<Tensor> {
    let cols = hiddens[0].cols();
    let rows: usize = hiddens.iter().map(|h| h.rows()).sum();
    let data: Vec<f64> = hiddens.iter().flat_map(|h| h.data().iter().copied()).collect();
    Tensor::new(vec![rows, cols], data)
}

fn batched_states(states: &[&Tensor]) -> Result<Tensor> {
    let cols = states[0].len();
    let data: Vec<f64> = states.iter().flat_map(|s| s.data().iter().copied()).collect();
    Tensor::new(vec![states.len(), cols], data)
}

/// Rolls out one episode from a reset world with ε-greedy actions.
pub fn collect_episode(
    world: &mut World,
    policy: &PolicyNetwork,
    store: &ParamStore,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<Episode> {
    world.reset();
    let m = world.config.num_uavs;
    let n = world.config.num_users;
    let mut hidden = policy.initial_hidden(m);
    let mut obs = world.observations();
    let mut state = world.global_state();
    let mut transitions = Vec::with_capacity(world.config.horizon);
    let mut total_return = 0.0;
    let mut aoi_total = 0u64;
    while !world.is_done() {
        let (q, next_hidden) = policy.q_values(store, &obs, &hidden)?;
        let action = select_actions(&q, epsilon, rng);
        let out = world.step(&action)?;
        total_return += out.reward;
        aoi_total += world.state.aoi_sum();
        let next_obs = world.observations();
        let next_state = world.global_state();
        transitions.push(Transition {
            obs: std::mem::replace(&mut obs, next_obs.clone()),
            hidden: std::mem::replace(&mut hidden, next_hidden.clone()),
            action,
            reward: out.reward,
            next_obs,
            next_hidden,
            state: std::mem::replace(&mut state, next_state.clone()),
            next_state,
            terminal: out.done,
        });
    }
    let k = world.config.horizon as f64;
    Ok(Episode {
        transitions,
        total_return,
        mean_aoi: aoi_total as f64 / (k * n as f64),
    })
}

/// Frozen copy of the policy and mixer parameters.
#[derive(Clone, Debug)]
pub struct TargetNetworks {
    pub store: ParamStore,
    syncs: u64,
}

impl TargetNetworks {
    pub fn new(live: &ParamStore) -> Self {
        Self {
            store: live.clone(),
            syncs: 0,
        }
    }

    /// Exact copy of the live parameters.
    pub fn sync(&mut self, live: &ParamStore) -> Result<()> {
        self.store.copy_values_from(live)?;
        self.syncs += 1;
        Ok(())
    }

    pub fn syncs(&self) -> u64 {
        self.syncs
    }
}

/// `y = (r/N + offset)·scale + γ·Q_tot^target(s', argmax)` with `N` users
/// (no bootstrap on terminal transitions), evaluated with the target
/// parameters only.
pub fn td_targets(
    batch: &[&Transition],
    policy: &PolicyNetwork,
    mixer: &MixerNetwork,
    targets: &TargetNetworks,
    config: &TrainConfig,
    num_users: usize,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let m = mixer.num_agents;
    let obs: Vec<&ObservationSet> = batch.iter().map(|t| &t.next_obs).collect();
    let input = PolicyInput::build(&obs, &policy.config)?;
    let hidden = batched_hidden(&batch.iter().map(|t| &t.next_hidden).collect::<Vec<_>>())?;
    let states = batched_states(&batch.iter().map(|t| &t.next_state).collect::<Vec<_>>())?;
    let store = &targets.store;
    let mut g = Graph::new();
    let h = g.input(hidden);
    let out = policy.forward(&mut g, store, &input, h)?;
    let q = g.value(out.q);
    let best: Vec<f64> = (0..q.rows())
        .map(|r| q.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let best = g.input(Tensor::new(vec![batch.len(), m], best)?);
    let s = g.input(states);
    let q_tot = mixer.forward(&mut g, store, best, s)?;
    let q_tot = g.value(q_tot).data();
    let users = num_users.max(1) as f64;
    Ok(batch
        .iter()
        .zip(q_tot)
        .map(|(t, &next)| {
            let r = (t.reward / users + config.reward_offset) * config.reward_scale;
            if t.terminal {
                r
            } else {
                r + config.gamma * next
            }
        })
        .collect())
}

/// Per-episode training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub steps: usize,
    #[serde(rename = "return")]
    pub total_return: f64,
    pub mean_aoi: f64,
    pub loss_avg: Option<f64>,
    pub epsilon: f64,
    pub wall_ms: u64,
}

/// Policy, mixer, target copy, optimiser and replay memory of one run.
#[derive(Clone, Debug)]
pub struct Learner {
    pub world: World,
    pub config: TrainConfig,
    pub store: ParamStore,
    pub policy: PolicyNetwork,
    pub mixer: MixerNetwork,
    pub targets: TargetNetworks,
    pub optimizer: AdamState,
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    gradient_steps: u64,
    episodes_done: usize,
}

impl Learner {
    pub fn new(
        world: WorldConfig,
        encoder: EncoderConfig,
        mixer: MixerConfig,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let world = World::new(world)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let policy = PolicyNetwork::new(&mut store, "policy", encoder, &mut rng)?;
        let mixer = MixerNetwork::new(
            &mut store,
            "mixer",
            mixer,
            world.config.num_uavs,
            world.config.state_dim(),
            &mut rng,
        )?;
        let optimizer = AdamState::new(
            &store,
            AdamConfig {
                learning_rate: config.learning_rate,
                epsilon: config.adam_epsilon,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            targets: TargetNetworks::new(&store),
            buffer: ReplayBuffer::new(config.buffer_capacity),
            world,
            config,
            store,
            policy,
            mixer,
            optimizer,
            rng,
            gradient_steps: 0,
            episodes_done: 0,
        })
    }

    pub fn gradient_steps(&self) -> u64 {
        self.gradient_steps
    }

    pub fn episodes_done(&self) -> usize {
        self.episodes_done
    }

    /// Collects one ε-greedy episode and appends its transitions.
    pub fn collect(&mut self) -> Result<Episode> {
        let episode = collect_episode(
            &mut self.world,
            &self.policy,
            &self.store,
            self.config.epsilon,
            &mut self.rng,
        )?;
        for t in &episode.transitions {
            self.buffer.push(t.clone());
        }
        Ok(episode)
    }

    /// Mean squared TD error of `batch` against fixed targets `y`. With
    /// `backward`, gradients are accumulated into the live store.
    pub fn td_loss(&mut self, batch: &[&Transition], y: &[f64], backward: bool) -> Result<f64> {
        if batch.len() != y.len() || batch.is_empty() {
            return Err(contract("batch and target lengths differ"));
        }
        let b = batch.len();
        let m = self.mixer.num_agents;
        let obs: Vec<&ObservationSet> = batch.iter().map(|t| &t.obs).collect();
        let input = PolicyInput::build(&obs, &self.policy.config)?;
        let hidden = batched_hidden(&batch.iter().map(|t| &t.hidden).collect::<Vec<_>>())?;
        let states = batched_states(&batch.iter().map(|t| &t.state).collect::<Vec<_>>())?;
        let actions: Vec<usize> = batch.iter().flat_map(|t| t.action.0.iter().copied()).collect();
        if actions.len() != b * m || actions.iter().any(|&a| a >= NUM_DIRECTIONS) {
            return Err(contract("stored joint actions malformed"));
        }

        let mut g = Graph::new();
        let h = g.input(hidden);
        let out = self.policy.forward(&mut g, &self.store, &input, h)?;
        let chosen = g.pick(out.q, Rc::new(actions))?;
        let q_locals = g.reshape(chosen, vec![b, m])?;
        let s = g.input(states);
        let q_tot = self.mixer.forward(&mut g, &self.store, q_locals, s)?;
        let target = g.input(Tensor::new(vec![b, 1], y.to_vec())?);
        let diff = g.sub(q_tot, target)?;
        let sq = g.square(diff);
        let loss = g.mean(sq);
        if backward {
            g.backward(loss, &mut self.store)?;
        }
        Ok(g.scalar(loss))
    }

    /// One gradient step on a uniformly sampled batch. Returns `None` (and
    /// does nothing) while the buffer holds fewer than `batch_size`
    /// transitions.
    pub fn train_step(&mut self) -> Result<Option<f64>> {
        let Some(batch) = self.buffer.sample(self.config.batch_size, &mut self.rng) else {
            return Ok(None);
        };
        let batch: Vec<Transition> = batch.into_iter().cloned().collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let y = td_targets(
            &refs,
            &self.policy,
            &self.mixer,
            &self.targets,
            &self.config,
            self.world.config.num_users,
        )?;
        self.store.zero_grad();
        let loss = self.td_loss(&refs, &y, true)?;
        if self.config.grad_clip > 0.0 {
            clip_grad_norm(&mut self.store, self.config.grad_clip);
        }
        self.optimizer.step(&mut self.store);
        self.gradient_steps += 1;
        if self.gradient_steps % self.config.target_sync_period == 0 {
            self.targets.sync(&self.store)?;
        }
        Ok(Some(loss))
    }

    /// Collect one episode, then (after warm-up) run the configured number
    /// of gradient steps.
    pub fn run_episode(&mut self) -> Result<EpisodeMetrics> {
        let start = Instant::now();
        let episode = self.collect()?;
        let mut losses = Vec::new();
        if self.episodes_done >= self.config.warmup_episodes {
            for _ in 0..self.config.train_steps_per_episode {
                if let Some(l) = self.train_step()? {
                    losses.push(l);
                }
            }
        }
        self.episodes_done += 1;
        Ok(EpisodeMetrics {
            episode: self.episodes_done,
            steps: episode.transitions.len(),
            total_return: episode.total_return,
            mean_aoi: episode.mean_aoi,
            loss_avg: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            epsilon: self.config.epsilon,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// Runs `total_episodes` episodes, reporting each one to `on_episode`.
    pub fn train(&mut self, mut on_episode: impl FnMut(&Learner, &EpisodeMetrics) -> Result<()>) -> Result<Vec<EpisodeMetrics>> {
        let mut all = Vec::with_capacity(self.config.total_episodes);
        while self.episodes_done < self.config.total_episodes {
            let m = self.run_episode()?;
            on_episode(self, &m)?;
            all.push(m);
        }
        Ok(all)
    }

    /// Greedy evaluation of the current policy; never touches the mixer.
    pub fn evaluate(&self, episodes: usize) -> Result<Evaluation> {
        evaluate_policy(&self.world.config, &self.policy, &self.store, episodes)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_store("", &self.store);
        let meta = &mut ck.metadata;
        meta.insert("num_uavs".into(), self.world.config.num_uavs.into());
        meta.insert("num_users".into(), self.world.config.num_users.into());
        meta.insert("episodes".into(), self.episodes_done.into());
        meta.insert("gradient_steps".into(), self.gradient_steps.into());
        meta.insert(
            "encoder".into(),
            serde_json::to_value(&self.policy.config).expect("encoder config serialises"),
        );
        meta.insert(
            "mixer".into(),
            serde_json::to_value(&self.mixer.config).expect("mixer config serialises"),
        );
        ck
    }

    /// Restores live and target parameters from a checkpoint of this layout.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_store("", &mut self.store)?;
        self.targets.sync(&self.store)
    }
}

/// Rebuilds the policy stored in a [`Learner::checkpoint`] without its
/// mixer. Returns the network, its parameters and the `(M, N)` it was
/// trained for.
pub fn load_policy(ck: &Checkpoint) -> Result<(PolicyNetwork, ParamStore, (usize, usize))> {
    let meta = |key: &str| {
        ck.metadata
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {key}")))
    };
    let encoder: EncoderConfig = serde_json::from_value(meta("encoder")?.clone())?;
    let dims: (usize, usize) = (
        serde_json::from_value(meta("num_uavs")?.clone())?,
        serde_json::from_value(meta("num_users")?.clone())?,
    );
    let mut store = ParamStore::new();
    let policy = PolicyNetwork::new(&mut store, "policy", encoder, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.load_store("", &mut store)?;
    Ok((policy, store, dims))
}

/// Aggregate of greedy (or random) rollouts.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub mean_aoi: f64,
    pub mean_return: f64,
    pub episode_mean_aoi: Vec<f64>,
    pub episode_returns: Vec<f64>,
    pub trajectories: Vec<Vec<TrajectoryRow>>,
}

fn summarise(per_episode: Vec<(f64, f64, Vec<TrajectoryRow>)>) -> Evaluation {
    let n = per_episode.len().max(1) as f64;
    let mean_aoi = per_episode.iter().map(|e| e.0).sum::<f64>() / n;
    let mean_return = per_episode.iter().map(|e| e.1).sum::<f64>() / n;
    let (episode_mean_aoi, (episode_returns, trajectories)) =
        per_episode.into_iter().map(|(a, r, t)| (a, (r, t))).unzip();
    Evaluation {
        mean_aoi,
        mean_return,
        episode_mean_aoi,
        episode_returns,
        trajectories,
    }
}

fn rollout(
    config: &WorldConfig,
    mut choose: impl FnMut(&World, &ObservationSet) -> Result<JointAction>,
) -> Result<(f64, f64, Vec<TrajectoryRow>)> {
    let mut world = World::new(config.clone())?;
    let mut rows = Vec::with_capacity(config.horizon * config.num_nodes());
    let mut ret = 0.0;
    let mut aoi_total = 0u64;
    while !world.is_done() {
        let obs = world.observations();
        let action = choose(&world, &obs)?;
        let before = world.state.clone();
        ret += world.step(&action)?.reward;
        aoi_total += world.state.aoi_sum();
        rows.extend(trajectory_rows(&before, &world.state));
    }
    let mean_aoi = aoi_total as f64 / (config.horizon * config.num_users) as f64;
    Ok((mean_aoi, ret, rows))
}

/// Greedy (ε = 0) rollouts of the policy alone on the configured scenario.
/// Execution is decentralised: the mixer is not an argument.
pub fn evaluate_policy(
    config: &WorldConfig,
    policy: &PolicyNetwork,
    store: &ParamStore,
    episodes: usize,
) -> Result<Evaluation> {
    let mut results = Vec::with_capacity(episodes);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..episodes {
        let mut hidden = policy.initial_hidden(config.num_uavs);
        results.push(rollout(config, |_, obs| {
            let (q, h) = policy.q_values(store, obs, &hidden)?;
            hidden = h;
            Ok(select_actions(&q, 0.0, &mut rng))
        })?);
    }
    Ok(summarise(results))
}

/// Uniformly random directions for every UAV at every slot.
pub fn evaluate_random(config: &WorldConfig, episodes: usize, seed: u64) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        results.push(rollout(config, |w, _| {
            Ok(JointAction(
                (0..w.config.num_uavs).map(|_| rng.gen_range(0..NUM_DIRECTIONS)).collect(),
            ))
        })?);
    }
    Ok(summarise(results))
}
