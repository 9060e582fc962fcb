//! The multi-UAV data-collection world.
//!
//! UAVs fly at constant speed in one of eight compass directions per slot,
//! users are static. A user whose squared distance to some UAV is at most
//! `t²` is served in that slot and its age of information drops to zero;
//! every other user ages by one. Nodes `0..M` of the observation graph are
//! UAVs, nodes `M..M+N` are users.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::Tensor;

pub const NUM_DIRECTIONS: usize = 8;

/// The length unit used by the scenario files: 40 m.
pub const XI_KM: f64 = 0.04;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub area_side: f64,
    pub num_uavs: usize,
    pub num_users: usize,
    /// Distance flown per slot (km).
    pub speed: f64,
    pub transmission_range: f64,
    pub detection_range: f64,
    pub horizon: usize,
    pub uav_start: (f64, f64),
    pub user_placement_seed: u64,
    /// Flight altitude in metres. Recorded only; the geometry is planar.
    pub altitude_m: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            area_side: 1.0,
            num_uavs: 3,
            num_users: 6,
            speed: XI_KM,
            transmission_range: 3.0 * XI_KM,
            detection_range: 7.0 * XI_KM,
            horizon: 80,
            uav_start: (0.5, 0.5),
            user_placement_seed: 0,
            altitude_m: 50.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if !(self.area_side > 0.0) {
            return bad("area_side_km", "must be positive");
        }
        if self.num_uavs == 0 {
            return bad("num_uavs", "must be at least 1");
        }
        if self.num_uavs > self.num_users {
            return bad("num_uavs", "must not exceed num_users");
        }
        if !(self.speed > 0.0) {
            return bad("speed_xi", "must be positive");
        }
        if !(self.transmission_range > 0.0) {
            return bad("transmission_range_xi", "must be positive");
        }
        if !(self.detection_range >= self.transmission_range) {
            return bad("detection_range_xi", "must be at least the transmission range");
        }
        if self.horizon == 0 {
            return bad("horizon", "must be positive");
        }
        let (x, y) = self.uav_start;
        if !(0.0..=self.area_side).contains(&x) || !(0.0..=self.area_side).contains(&y) {
            return bad("uav_start", "must lie inside the area");
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_uavs + self.num_users
    }

    /// Length of [`global_state_vector`].
    pub fn state_dim(&self) -> usize {
        2 * self.num_uavs + 3 * self.num_users
    }
}

/// Scenario file layout; lengths are given in units of `xi_km`. Missing
/// keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub area_side_km: f64,
    pub num_uavs: usize,
    pub num_users: usize,
    pub xi_km: f64,
    pub speed_xi: f64,
    pub transmission_range_xi: f64,
    pub detection_range_xi: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            area_side_km: 1.0,
            num_uavs: 3,
            num_users: 6,
            xi_km: XI_KM,
            speed_xi: 1.0,
            transmission_range_xi: 3.0,
            detection_range_xi: 7.0,
            horizon: 80,
            seed: 0,
        }
    }
}

impl Scenario {
    pub fn world_config(&self) -> Result<WorldConfig> {
        if !(self.xi_km > 0.0) {
            return Err(Error::Config {
                key: "xi_km".into(),
                reason: "must be positive".into(),
            });
        }
        let half = self.area_side_km / 2.0;
        let cfg = WorldConfig {
            area_side: self.area_side_km,
            num_uavs: self.num_uavs,
            num_users: self.num_users,
            speed: self.speed_xi * self.xi_km,
            transmission_range: self.transmission_range_xi * self.xi_km,
            detection_range: self.detection_range_xi * self.xi_km,
            horizon: self.horizon,
            uav_start: (half, half),
            user_placement_seed: self.seed,
            altitude_m: 50.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub uav_positions: Vec<(f64, f64)>,
    pub user_positions: Vec<(f64, f64)>,
    pub aoi: Vec<u32>,
    pub slot: usize,
}

impl WorldState {
    pub fn position(&self, node: usize) -> (f64, f64) {
        let m = self.uav_positions.len();
        if node < m {
            self.uav_positions[node]
        } else {
            self.user_positions[node - m]
        }
    }

    pub fn aoi_sum(&self) -> u64 {
        self.aoi.iter().map(|&a| a as u64).sum()
    }
}

/// One flight direction per UAV; direction `i` is `i · 45°`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct JointAction(pub Vec<usize>);

impl JointAction {
    pub fn new(directions: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = directions.iter().find(|&&d| d >= NUM_DIRECTIONS) {
            return Err(contract(format!("direction index {bad} out of range")));
        }
        Ok(Self(directions))
    }

    pub fn directions(&self) -> &[usize] {
        &self.0
    }
}

/// Unit displacement for a direction index.
pub fn heading(direction: usize) -> (f64, f64) {
    let angle = (direction as f64) * std::f64::consts::FRAC_PI_4;
    (angle.cos(), angle.sin())
}

fn sq_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

/// UAVs at the start point, users uniform over the area, all ages zero.
pub fn reset(config: &WorldConfig, seed: u64) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = config.area_side;
    let user_positions = (0..config.num_users)
        .map(|_| (rng.gen_range(0.0..=side), rng.gen_range(0.0..=side)))
        .collect();
    WorldState {
        uav_positions: vec![config.uav_start; config.num_uavs],
        user_positions,
        aoi: vec![0; config.num_users],
        slot: 0,
    }
}

/// Advances every UAV by `speed` along its heading, clamped to the area.
pub fn move_uavs(state: &mut WorldState, action: &JointAction, config: &WorldConfig) -> Result<()> {
    if action.0.len() != state.uav_positions.len() {
        return Err(contract(format!(
            "{} directions for {} UAVs",
            action.0.len(),
            state.uav_positions.len()
        )));
    }
    let side = config.area_side;
    for (pos, &dir) in state.uav_positions.iter_mut().zip(&action.0) {
        if dir >= NUM_DIRECTIONS {
            return Err(contract(format!("direction index {dir} out of range")));
        }
        let (c, s) = heading(dir);
        pos.0 = (pos.0 + config.speed * c).clamp(0.0, side);
        pos.1 = (pos.1 + config.speed * s).clamp(0.0, side);
    }
    Ok(())
}

/// Whether user `i` lies within transmission range of some UAV.
pub fn is_covered(state: &WorldState, user: usize, config: &WorldConfig) -> bool {
    let t2 = config.transmission_range * config.transmission_range;
    let u = state.user_positions[user];
    state.uav_positions.iter().any(|&p| sq_dist(p, u) <= t2)
}

/// Resets the age of covered users, increments everyone else.
pub fn update_aoi(state: &mut WorldState, config: &WorldConfig) {
    for i in 0..state.aoi.len() {
        if is_covered(state, i, config) {
            state.aoi[i] = 0;
        } else {
            state.aoi[i] += 1;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// `−Σ aoi` after the update.
    pub reward: f64,
    pub done: bool,
}

/// Move, then coverage test and age update, then advance the slot counter.
pub fn step(state: &mut WorldState, action: &JointAction, config: &WorldConfig) -> Result<StepOutcome> {
    if state.slot >= config.horizon {
        return Err(contract(format!(
            "episode finished at slot {}",
            state.slot
        )));
    }
    move_uavs(state, action, config)?;
    update_aoi(state, config);
    state.slot += 1;
    Ok(StepOutcome {
        reward: -(state.aoi_sum() as f64),
        done: state.slot == config.horizon,
    })
}

/// Per-node partial observations and the detection-range adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub num_uavs: usize,
    pub num_users: usize,
    /// `(M+N) × M × 2` relative UAV coordinates.
    pub uav_obs: Vec<f64>,
    /// `(M+N) × N × 3` relative user coordinates and age.
    pub user_obs: Vec<f64>,
    /// `(M+N) × (M+N)` 0/1 adjacency, row-major.
    pub adjacency: Vec<u8>,
}

impl ObservationSet {
    pub fn num_nodes(&self) -> usize {
        self.num_uavs + self.num_users
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.num_nodes() + j] != 0
    }

    pub fn uav_entry(&self, node: usize, uav: usize) -> [f64; 2] {
        let o = (node * self.num_uavs + uav) * 2;
        [self.uav_obs[o], self.uav_obs[o + 1]]
    }

    pub fn user_entry(&self, node: usize, user: usize) -> [f64; 3] {
        let o = (node * self.num_users + user) * 3;
        [self.user_obs[o], self.user_obs[o + 1], self.user_obs[o + 2]]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_nodes()).filter(move |&j| self.adjacent(i, j))
    }

    /// Relabels nodes: new node `k` is old node `perm[k]`. `perm` must map
    /// UAVs to UAVs and users to users.
    pub fn permuted(&self, perm: &[usize]) -> ObservationSet {
        let (m, n) = (self.num_uavs, self.num_users);
        let nodes = m + n;
        let mut out = ObservationSet {
            num_uavs: m,
            num_users: n,
            uav_obs: vec![0.0; self.uav_obs.len()],
            user_obs: vec![0.0; self.user_obs.len()],
            adjacency: vec![0; self.adjacency.len()],
        };
        for i in 0..nodes {
            for j in 0..nodes {
                out.adjacency[i * nodes + j] = self.adjacency[perm[i] * nodes + perm[j]];
            }
            for v in 0..m {
                let e = self.uav_entry(perm[i], perm[v]);
                let o = (i * m + v) * 2;
                out.uav_obs[o..o + 2].copy_from_slice(&e);
            }
            for u in 0..n {
                let e = self.user_entry(perm[i], perm[m + u] - m);
                let o = (i * n + u) * 3;
                out.user_obs[o..o + 3].copy_from_slice(&e);
            }
        }
        out
    }
}

/// Builds relative-coordinate observations for every node. Node `i` sees
/// node `j ≠ i` iff their distance is at most the detection range; unseen
/// entries stay zero.
pub fn build_observations(state: &WorldState, config: &WorldConfig) -> ObservationSet {
    let m = state.uav_positions.len();
    let n = state.user_positions.len();
    let nodes = m + n;
    let d2 = config.detection_range * config.detection_range;
    let mut obs = ObservationSet {
        num_uavs: m,
        num_users: n,
        uav_obs: vec![0.0; nodes * m * 2],
        user_obs: vec![0.0; nodes * n * 3],
        adjacency: vec![0; nodes * nodes],
    };
    for i in 0..nodes {
        let pi = state.position(i);
        for j in 0..nodes {
            if i == j {
                continue;
            }
            let pj = state.position(j);
            if sq_dist(pi, pj) > d2 {
                continue;
            }
            obs.adjacency[i * nodes + j] = 1;
            let (dx, dy) = (pj.0 - pi.0, pj.1 - pi.1);
            if j < m {
                let o = (i * m + j) * 2;
                obs.uav_obs[o] = dx;
                obs.uav_obs[o + 1] = dy;
            } else {
                let o = (i * n + (j - m)) * 3;
                obs.user_obs[o] = dx;
                obs.user_obs[o + 1] = dy;
                obs.user_obs[o + 2] = state.aoi[j - m] as f64;
            }
        }
    }
    obs
}

/// UAV coordinates and user coordinates divided by the area side, then
/// ages divided by the horizon.
pub fn global_state_vector(state: &WorldState, config: &WorldConfig) -> Tensor {
    let side = config.area_side;
    let mut v = Vec::with_capacity(config.state_dim());
    for &(x, y) in &state.uav_positions {
        v.push(x / side);
        v.push(y / side);
    }
    for &(x, y) in &state.user_positions {
        v.push(x / side);
        v.push(y / side);
    }
    let k = config.horizon as f64;
    v.extend(state.aoi.iter().map(|&a| a as f64 / k));
    Tensor::vector(v)
}

/// Convenience owner of a config and its evolving state.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub state: WorldState,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let state = reset(&config, config.user_placement_seed);
        Ok(Self { config, state })
    }

    /// Restores the initial state of the configured scenario.
    pub fn reset(&mut self) {
        self.state = reset(&self.config, self.config.user_placement_seed);
    }

    pub fn step(&mut self, action: &JointAction) -> Result<StepOutcome> {
        step(&mut self.state, action, &self.config)
    }

    pub fn observations(&self) -> ObservationSet {
        build_observations(&self.state, &self.config)
    }

    pub fn global_state(&self) -> Tensor {
        global_state_vector(&self.state, &self.config)
    }

    pub fn is_done(&self) -> bool {
        self.state.slot >= self.config.horizon
    }
}

pub const TRAJECTORY_HEADER: &str = "slot,entity_kind,entity_id,x_km,y_km,aoi";

/// One trajectory CSV row: the entity's position at the start of `slot`
/// and, for users, its age at the end of that slot.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub slot: usize,
    pub is_uav: bool,
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub aoi: Option<u32>,
}

/// Rows for one slot: `before` is the state the joint action was chosen in,
/// `after` the state once the slot has been played.
pub fn trajectory_rows(before: &WorldState, after: &WorldState) -> Vec<TrajectoryRow> {
    let slot = before.slot;
    let uavs = before.uav_positions.iter().enumerate().map(|(id, &(x, y))| TrajectoryRow {
        slot,
        is_uav: true,
        id,
        x,
        y,
        aoi: None,
    });
    let users = before.user_positions.iter().enumerate().map(|(id, &(x, y))| TrajectoryRow {
        slot,
        is_uav: false,
        id,
        x,
        y,
        aoi: Some(after.aoi[id]),
    });
    uavs.chain(users).collect()
}

pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 32);
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for r in rows {
        let kind = if r.is_uav { "uav" } else { "user" };
        let aoi = r.aoi.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{},{}", r.slot, kind, r.id, r.x, r.y, aoi);
    }
    fs::write(path, out)?;
    Ok(())
}
