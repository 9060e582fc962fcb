//! The `train`, `eval` and `sweep` commands.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Mutex};

use serde::{Deserialize, Serialize};
use skyaoi_core::env::{write_trajectory_csv, Scenario};
use skyaoi_core::nn::Checkpoint;
use skyaoi_core::trainer::{evaluate_policy, load_policy};
use skyaoi_core::{Learner, ParamStore, PolicyNetwork};

use crate::config::{Algorithm, ExperimentConfig, SweepSpec, SweepValue};
use crate::error::CliError;

/// Outcome of a greedy evaluation, written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub mean_aoi: f64,
    #[serde(rename = "return")]
    pub mean_return: f64,
    pub episode_mean_aoi: Vec<f64>,
    pub episode_returns: Vec<f64>,
    pub trajectories: Vec<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub summary: EvalSummary,
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Greedy rollouts of a policy; episode `e` plays the layout drawn from
/// `seed + e`. Trajectories go to `<out>/<prefix>_ep<e>.csv`.
pub fn evaluate_to_dir(
    policy: &PolicyNetwork,
    store: &ParamStore,
    scenario: &Scenario,
    episodes: usize,
    seed: u64,
    out: &Path,
    prefix: &str,
) -> Result<EvalSummary, CliError> {
    create_dir(out)?;
    let mut summary = EvalSummary {
        episodes,
        seeds: Vec::with_capacity(episodes),
        mean_aoi: 0.0,
        mean_return: 0.0,
        episode_mean_aoi: Vec::with_capacity(episodes),
        episode_returns: Vec::with_capacity(episodes),
        trajectories: Vec::with_capacity(episodes),
    };
    for e in 0..episodes {
        let layout_seed = seed.wrapping_add(e as u64);
        let world = Scenario {
            seed: layout_seed,
            ..scenario.clone()
        }
        .world_config()?;
        let result = evaluate_policy(&world, policy, store, 1)?;
        let path = out.join(format!("{prefix}_ep{e}.csv"));
        write_trajectory_csv(&path, &result.trajectories[0])
            .map_err(|err| CliError::Io(format!("{}: {err}", path.display())))?;
        summary.seeds.push(layout_seed);
        summary.episode_mean_aoi.push(result.mean_aoi);
        summary.episode_returns.push(result.mean_return);
        summary.trajectories.push(path);
    }
    let n = episodes.max(1) as f64;
    summary.mean_aoi = summary.episode_mean_aoi.iter().sum::<f64>() / n;
    summary.mean_return = summary.episode_returns.iter().sum::<f64>() / n;
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    write_file(&out.join(format!("{prefix}_summary.json")), &json)?;
    Ok(summary)
}

/// Trains one seed into `dir` and evaluates the final policy greedily.
pub fn train_run(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunOutcome, CliError> {
    let checkpoints = dir.join("checkpoints");
    create_dir(&checkpoints)?;
    let single = ExperimentConfig {
        seeds: vec![seed],
        ..cfg.clone()
    };
    write_file(&dir.join("config.toml"), &single.to_toml())?;

    let world = cfg.world(seed)?;
    let encoder = cfg.encoder(&world);
    let train = cfg.train_config(seed);
    let mut learner = Learner::new(world, encoder, cfg.mixer(), train.clone())?;

    let metrics_path = dir.join("metrics.jsonl");
    let file = File::create(&metrics_path).map_err(|e| CliError::Io(format!("{}: {e}", metrics_path.display())))?;
    let mut metrics = BufWriter::new(file);
    let mut evals = if train.eval_interval > 0 {
        let path = dir.join("eval.jsonl");
        Some(BufWriter::new(
            File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?,
        ))
    } else {
        None
    };
    let keep_time = cfg.record_wall_time;
    learner.train(|l, m| {
        let mut record = m.clone();
        if !keep_time {
            record.wall_ms = 0;
        }
        serde_json::to_writer(&mut metrics, &record)?;
        metrics.write_all(b"\n")?;
        let ep = l.episodes_done();
        if train.checkpoint_interval > 0 && ep % train.checkpoint_interval == 0 {
            l.checkpoint().save(&checkpoints.join(format!("episode_{ep}.json")))?;
        }
        if let Some(w) = evals.as_mut() {
            if ep % train.eval_interval == 0 {
                let e = l.evaluate(train.eval_episodes)?;
                let line = serde_json::json!({"episode": ep, "mean_aoi": e.mean_aoi, "return": e.mean_return});
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    })?;
    metrics.flush()?;
    if let Some(mut w) = evals {
        w.flush()?;
    }
    learner.checkpoint().save(&checkpoints.join("final.json"))?;

    let summary = evaluate_to_dir(
        &learner.policy,
        &learner.store,
        &Scenario {
            seed,
            ..cfg.scenario.clone()
        },
        train.eval_episodes,
        seed,
        &dir.join("trajectories"),
        "final",
    )?;
    Ok(RunOutcome {
        seed,
        dir: dir.to_path_buf(),
        summary,
    })
}

/// `train`: one run per seed (or only `seed_override`).
pub fn cmd_train(cfg: &ExperimentConfig, seed_override: Option<u64>) -> Result<Vec<RunOutcome>, CliError> {
    let seeds = seed_override.map(|s| vec![s]).unwrap_or_else(|| cfg.run_seeds());
    seeds.into_iter().map(|s| train_run(cfg, s, &cfg.run_dir(s))).collect()
}

/// `eval`: greedy rollouts of a checkpointed policy on `scenario`.
pub fn cmd_eval(
    checkpoint: &Path,
    scenario: &Scenario,
    episodes: usize,
    seed: Option<u64>,
    out: &Path,
) -> Result<EvalSummary, CliError> {
    let ck = Checkpoint::load(checkpoint).map_err(|e| match e {
        skyaoi_core::Error::Io(io) => CliError::Io(format!("{}: {io}", checkpoint.display())),
        other => other.into(),
    })?;
    let (policy, store, (m, n)) = load_policy(&ck)?;
    if (m, n) != (scenario.num_uavs, scenario.num_users) {
        return Err(CliError::ShapeMismatch(format!(
            "checkpoint was trained for {m} UAVs and {n} users, scenario has {} UAVs and {} users",
            scenario.num_uavs, scenario.num_users
        )));
    }
    if episodes == 0 {
        return Err(CliError::config("episodes", "must be at least 1"));
    }
    evaluate_to_dir(&policy, &store, scenario, episodes, seed.unwrap_or(scenario.seed), out, "eval")
}

/// Default output directory of `eval`: the run's `trajectories/` when the
/// checkpoint sits in a run's `checkpoints/`, else `eval/` next to it.
pub fn default_eval_dir(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    match (parent.file_name(), parent.parent()) {
        (Some(name), Some(run)) if name == "checkpoints" => run.join("trajectories"),
        _ => parent.join("eval"),
    }
}

pub const RESULTS_FILE: &str = "sweep_results.csv";
pub const SUMMARY_FILE: &str = "sweep_summary.csv";
pub const FAILURES_FILE: &str = "sweep_failures.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub swept_value: String,
    pub algorithm: String,
    pub seed: u64,
    pub mean_aoi: f64,
    #[serde(rename = "return")]
    pub mean_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub swept_value: String,
    pub algorithm: String,
    pub runs: usize,
    pub mean_aoi: f64,
    pub std_aoi: f64,
    pub mean_return: f64,
    pub std_return: f64,
}

#[derive(Serialize)]
struct FailureRow {
    swept_value: String,
    algorithm: String,
    seed: u64,
    error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub completed: usize,
    pub skipped: usize,
    pub failed: usize,
}

struct Cell {
    value: SweepValue,
    algorithm: Algorithm,
    seed: u64,
}

impl Cell {
    fn key(&self) -> (String, String, u64) {
        (self.value.label(), self.algorithm.tag().to_string(), self.seed)
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>, CliError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| CliError::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Appending CSV writer that emits the header only into an empty file.
fn append_writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Mean ± sample standard deviation per (swept value, algorithm), in
/// first-appearance order.
pub fn summarise_rows(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<((String, String), Vec<&SweepRow>)> = Vec::new();
    for r in rows {
        let key = (r.swept_value.clone(), r.algorithm.clone());
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((swept_value, algorithm), rs)| {
            let aoi: Vec<f64> = rs.iter().map(|r| r.mean_aoi).collect();
            let ret: Vec<f64> = rs.iter().map(|r| r.mean_return).collect();
            let (mean_aoi, std_aoi) = mean_std(&aoi);
            let (mean_return, std_return) = mean_std(&ret);
            SummaryRow {
                swept_value,
                algorithm,
                runs: rs.len(),
                mean_aoi,
                std_aoi,
                mean_return,
                std_return,
            }
        })
        .collect()
}

/// `sweep`: trains and evaluates every (value, algorithm, seed) cell on
/// `jobs` worker threads. Only this thread writes the CSV files.
pub fn cmd_sweep(cfg: &ExperimentConfig, spec: &SweepSpec, resume: bool, jobs: usize) -> Result<SweepReport, CliError> {
    let points = spec.points(&cfg.scenario)?;
    let algorithms = if spec.algorithms.is_empty() {
        vec![cfg.algorithm]
    } else {
        spec.algorithms.clone()
    };
    let seeds = spec.seeds(cfg.scenario.seed);
    create_dir(&cfg.output_dir)?;
    let results_path = cfg.output_dir.join(RESULTS_FILE);
    if !resume {
        for f in [RESULTS_FILE, SUMMARY_FILE, FAILURES_FILE] {
            let p = cfg.output_dir.join(f);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            }
        }
    }
    let done: HashSet<(String, String, u64)> = read_rows(&results_path)?
        .into_iter()
        .map(|r| (r.swept_value, r.algorithm, r.seed))
        .collect();

    let mut cells = Vec::new();
    let mut skipped = 0;
    for value in &points {
        for &algorithm in &algorithms {
            for &seed in &seeds {
                let cell = Cell {
                    value: value.clone(),
                    algorithm,
                    seed,
                };
                if done.contains(&cell.key()) {
                    skipped += 1;
                } else {
                    cells.push(cell);
                }
            }
        }
    }
    let total = cells.len();
    cells.reverse();
    let queue = Mutex::new(cells);
    let (tx, rx) = mpsc::channel::<(Cell, Result<RunOutcome, CliError>)>();

    let mut results = append_writer(&results_path)?;
    let mut failures: Option<csv::Writer<File>> = None;
    let mut report = SweepReport {
        completed: 0,
        skipped,
        failed: 0,
    };
    std::thread::scope(|scope| -> Result<(), CliError> {
        for _ in 0..jobs.max(1).min(total.max(1)) {
            let tx = tx.clone();
            let queue = &queue;
            scope.spawn(move || loop {
                let Some(cell) = queue.lock().expect("queue lock").pop() else {
                    break;
                };
                let run_cfg = ExperimentConfig {
                    algorithm: cell.algorithm,
                    scenario: cell.value.apply(&cfg.scenario),
                    output_dir: cfg.output_dir.join("cells").join(cell.value.label()),
                    ..cfg.clone()
                };
                let outcome = train_run(&run_cfg, cell.seed, &run_cfg.run_dir(cell.seed));
                if tx.send((cell, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (cell, outcome) in rx {
            let (swept_value, algorithm, seed) = cell.key();
            match outcome {
                Ok(run) => {
                    results.serialize(SweepRow {
                        swept_value,
                        algorithm,
                        seed,
                        mean_aoi: run.summary.mean_aoi,
                        mean_return: run.summary.mean_return,
                    })?;
                    results.flush()?;
                    report.completed += 1;
                }
                Err(err) => {
                    eprintln!("cell {swept_value} {algorithm} seed {seed} failed: {err}");
                    if failures.is_none() {
                        failures = Some(append_writer(&cfg.output_dir.join(FAILURES_FILE))?);
                    }
                    let w = failures.as_mut().expect("failure writer");
                    w.serialize(FailureRow {
                        swept_value,
                        algorithm,
                        seed,
                        error: err.to_string(),
                    })?;
                    w.flush()?;
                    report.failed += 1;
                }
            }
        }
        Ok(())
    })?;
    drop(results);

    let rows = read_rows(&results_path)?;
    let mut summary = csv::Writer::from_path(cfg.output_dir.join(SUMMARY_FILE))?;
    for row in summarise_rows(&rows) {
        summary.serialize(row)?;
    }
    summary.flush()?;
    if total > 0 && report.failed == total {
        return Err(CliError::Runtime(format!("all {total} sweep cells failed")));
    }
    Ok(report)
}
