//! Experiment and sweep configuration files (TOML).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use skyaoi_core::env::Scenario;
use skyaoi_core::{EncoderConfig, MixerConfig, TrainConfig, Variant, WorldConfig};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "qedgix")]
    Qedgix,
    #[serde(rename = "agg-gnn")]
    AggGnn,
    #[serde(rename = "qmix")]
    Qmix,
}

impl Algorithm {
    pub fn variant(self) -> Variant {
        match self {
            Algorithm::Qedgix => Variant::EdgeConv,
            Algorithm::AggGnn => Variant::Agg,
            Algorithm::Qmix => Variant::None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::Qedgix => "qedgix",
            Algorithm::AggGnn => "agg-gnn",
            Algorithm::Qmix => "qmix",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Algorithm {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "qedgix" => Ok(Algorithm::Qedgix),
            "agg-gnn" => Ok(Algorithm::AggGnn),
            "qmix" => Ok(Algorithm::Qmix),
            other => Err(CliError::config("algorithm", format!("unknown tag {other:?}"))),
        }
    }
}

/// Layer widths of the policy and mixer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub feature_width: usize,
    pub entity_width: usize,
    pub graph_layers: usize,
    pub graph_hidden_width: usize,
    pub embed_width: usize,
    pub hypernet_width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        let m = MixerConfig::default();
        Self {
            feature_width: e.feature_width,
            entity_width: e.entity_width,
            graph_layers: e.graph_layers,
            graph_hidden_width: e.graph_hidden_width,
            embed_width: m.embed_width,
            hypernet_width: m.hypernet_width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// One run per seed. A run's seed drives network initialisation,
    /// exploration and the user layout.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Write real elapsed time into `wall_ms`. Off by default so that
    /// repeated runs produce byte-identical metrics.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub scenario: Scenario,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub network: NetworkConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::from_toml(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scenario.world_config()?;
        self.train.validate()?;
        self.encoder(&self.scenario.world_config()?).validate()?;
        if self.network.embed_width == 0 || self.network.hypernet_width == 0 {
            return Err(CliError::config("network", "mixer widths must be positive"));
        }
        Ok(())
    }

    /// The seeds to run: the explicit list, else the scenario seed.
    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.scenario.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// World of the run with seed `seed`.
    pub fn world(&self, seed: u64) -> Result<WorldConfig, CliError> {
        let scenario = Scenario {
            seed,
            ..self.scenario.clone()
        };
        Ok(scenario.world_config()?)
    }

    pub fn encoder(&self, world: &WorldConfig) -> EncoderConfig {
        EncoderConfig {
            feature_width: self.network.feature_width,
            recurrent_width: self.network.feature_width,
            entity_width: self.network.entity_width,
            graph_layers: self.network.graph_layers,
            graph_hidden_width: self.network.graph_hidden_width,
            ..EncoderConfig::for_world(world, self.algorithm.variant())
        }
    }

    pub fn mixer(&self) -> MixerConfig {
        MixerConfig {
            embed_width: self.network.embed_width,
            hypernet_width: self.network.hypernet_width,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// `<output>/<alg>_<M>uav_<N>user_seed<S>`.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!(
            "{}_{}uav_{}user_seed{}",
            self.algorithm, self.scenario.num_uavs, self.scenario.num_users, seed
        ))
    }
}

/// Reads a scenario from either a bare scenario file or an experiment
/// config (its `[scenario]` table).
pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let value: toml::Table = text.parse().map_err(|e| CliError::from_toml(&e))?;
    if value.contains_key("scenario") {
        Ok(ExperimentConfig::parse(&text)?.scenario)
    } else {
        let s: Scenario = toml::from_str(&text).map_err(|e| CliError::from_toml(&e))?;
        s.world_config()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKey {
    DetectionRangeXi,
    /// Grid over `num_uavs × num_users`.
    Scale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueRange {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub key: SweepKey,
    /// Explicit values of `detection_range_xi`.
    #[serde(default)]
    pub values: Vec<f64>,
    /// Inclusive range of `detection_range_xi`, as an alternative to `values`.
    #[serde(default)]
    pub range: Option<ValueRange>,
    #[serde(default)]
    pub num_uavs: Vec<usize>,
    #[serde(default)]
    pub num_users: Vec<usize>,
    /// Algorithms to run in every cell; defaults to the config's algorithm.
    #[serde(default)]
    pub algorithms: Vec<Algorithm>,
    /// Seeds per cell. Defaults to `repetitions` consecutive seeds starting
    /// at the scenario seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "three")]
    pub repetitions: u64,
}

fn three() -> u64 {
    3
}

/// One point of a sweep, before seeds and algorithms are attached.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepValue {
    Detection(f64),
    Scale(usize, usize),
}

impl SweepValue {
    pub fn label(&self) -> String {
        match self {
            SweepValue::Detection(d) => format!("{d}"),
            SweepValue::Scale(m, n) => format!("{m}x{n}"),
        }
    }

    pub fn apply(&self, scenario: &Scenario) -> Scenario {
        match *self {
            SweepValue::Detection(d) => Scenario {
                detection_range_xi: d,
                ..scenario.clone()
            },
            SweepValue::Scale(m, n) => Scenario {
                num_uavs: m,
                num_users: n,
                ..scenario.clone()
            },
        }
    }
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::from_toml(&e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn seeds(&self, base: u64) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.repetitions).map(|r| base + r).collect()
        } else {
            self.seeds.clone()
        }
    }

    /// Distinct swept values, validated against `base`.
    pub fn points(&self, base: &Scenario) -> Result<Vec<SweepValue>, CliError> {
        let points: Vec<SweepValue> = match self.key {
            SweepKey::DetectionRangeXi => {
                let mut v = self.values.clone();
                if let Some(r) = &self.range {
                    if !(r.step > 0.0) || r.end < r.start {
                        return Err(CliError::config("range", "needs start ≤ end and step > 0"));
                    }
                    let count = ((r.end - r.start) / r.step + 1e-9).floor() as usize;
                    v.extend((0..=count).map(|i| r.start + i as f64 * r.step));
                }
                v.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
                v.into_iter().map(SweepValue::Detection).collect()
            }
            SweepKey::Scale => {
                if self.num_uavs.is_empty() || self.num_users.is_empty() {
                    return Err(CliError::config("num_uavs", "scale sweeps need num_uavs and num_users lists"));
                }
                self.num_uavs
                    .iter()
                    .flat_map(|&m| self.num_users.iter().map(move |&n| SweepValue::Scale(m, n)))
                    .collect()
            }
        };
        if points.is_empty() {
            return Err(CliError::config("values", "sweep has no values"));
        }
        for p in &points {
            p.apply(base).world_config()?;
        }
        if self.repetitions == 0 {
            return Err(CliError::config("repetitions", "must be at least 1"));
        }
        Ok(points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
algorithm = "qedgix"
output_dir = "out"
seeds = [1, 2]

[scenario]
num_uavs = 3
num_users = 6
detection_range_xi = 7.0

[train]
total_episodes = 5
batch_size = 16

[network]
feature_width = 16
"#;

    #[test]
    fn round_trip_is_field_equal() {
        let a = ExperimentConfig::parse(FULL).unwrap();
        let b = ExperimentConfig::parse(&a.to_toml()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.total_episodes, 5);
        assert_eq!(a.network.feature_width, 16);
        assert_eq!(a.scenario.transmission_range_xi, 3.0);
    }

    #[test]
    fn algorithm_tags_map_to_variants() {
        assert_eq!(Algorithm::Qmix.variant(), Variant::None);
        assert_eq!(Algorithm::Qedgix.variant(), Variant::EdgeConv);
        assert_eq!(Algorithm::AggGnn.variant(), Variant::Agg);
        assert!("dqn".parse::<Algorithm>().is_err());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse("algorithm = \"qmix\"\n[scenario]\nnum_uav = 3\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("num_uav"), "{err}");
    }

    #[test]
    fn invalid_value_is_named() {
        let err = ExperimentConfig::parse("algorithm = \"qmix\"\n[scenario]\ndetection_range_xi = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("detection_range_xi"), "{err}");
    }

    #[test]
    fn detection_range_sweep_values() {
        let spec = SweepSpec::parse("key = \"detection_range_xi\"\nrange = { start = 4.0, end = 9.0, step = 0.5 }\n").unwrap();
        let pts = spec.points(&Scenario::default()).unwrap();
        assert_eq!(pts.len(), 11);
        assert_eq!(pts[0], SweepValue::Detection(4.0));
        assert_eq!(pts[10], SweepValue::Detection(9.0));
    }

    #[test]
    fn scale_grid_cells() {
        let spec = SweepSpec::parse("key = \"scale\"\nnum_uavs = [2, 3, 4]\nnum_users = [4, 6, 8]\n").unwrap();
        assert_eq!(spec.points(&Scenario::default()).unwrap().len(), 9);
    }

    #[test]
    fn detection_below_transmission_is_rejected() {
        let spec = SweepSpec::parse("key = \"detection_range_xi\"\nvalues = [2.0]\n").unwrap();
        assert!(spec.points(&Scenario::default()).is_err());
    }
}
