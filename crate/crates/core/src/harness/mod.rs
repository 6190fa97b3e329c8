//! Experiment protocol: method runs, evaluation under mobility, the
//! localization-noise sweep, dimensionality arithmetic and result files.

mod config;

pub use config::{RunConfig, SceneConfig};
pub use crate::marl::{run_concurrent_rollouts, Method, RolloutBatch};

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{coverage_map, GridSpec, Scene};
use crate::env::Env;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::marl::{self, derive_seed, ActMode, EnvSlot, EpisodeRecord, Policies};

/// `K^L`, the number of distinct allocations.
pub fn allocation_space(n_users: usize, n_segments: usize) -> Result<usize> {
    let exp = u32::try_from(n_segments).map_err(|_| Error::Overflow(format!("{n_users}^{n_segments}")))?;
    n_users.checked_pow(exp).ok_or_else(|| Error::Overflow(format!("{n_users}^{n_segments}")))
}

/// Control dimensions `(D_tile, D_focal)` = `(K^L + 2 N_r N_c, K^L + 3 L)`.
pub fn dimensionality_report(k: usize, l: usize, n_rows: usize, n_cols: usize) -> Result<(usize, usize)> {
    if k == 0 || l == 0 || n_rows == 0 || n_cols == 0 {
        return Err(Error::Config("dimensions must be positive".into()));
    }
    let overflow = || Error::Overflow("control dimension".into());
    let alloc = allocation_space(k, l)?;
    let tiles = n_rows.checked_mul(n_cols).and_then(|t| t.checked_mul(2)).ok_or_else(overflow)?;
    let focal = l.checked_mul(3).ok_or_else(overflow)?;
    Ok((alloc.checked_add(tiles).ok_or_else(overflow)?, alloc.checked_add(focal).ok_or_else(overflow)?))
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained parameters, optimizer moments and the update RNG, as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub method: Method,
    pub n_users: usize,
    pub n_segments: usize,
    pub episodes: usize,
    pub seed: u64,
    /// noise level the policies were trained at
    pub train_sigma: f64,
    pub policies: Policies,
    pub rng: Option<ChaCha8Rng>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn check_dims(&self, n_users: usize, n_segments: usize) -> Result<()> {
        if self.n_users != n_users || self.n_segments != n_segments {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint has K={}, L={}; config has K={n_users}, L={n_segments}",
                self.n_users, self.n_segments
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub curve: Vec<EpisodeRecord>,
    pub checkpoint: Checkpoint,
}

impl MethodRun {
    /// Mean per-step reward over the last `n` episodes.
    pub fn final_mean_reward(&self, n: usize) -> f64 {
        let tail = &self.curve[self.curve.len().saturating_sub(n)..];
        tail.iter().map(|r| r.mean_reward).sum::<f64>() / tail.len().max(1) as f64
    }
}

pub fn write_curve_csv(path: &Path, curve: &[EpisodeRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["episode", "mean_reward", "mean_rssi_dbm", "alpha", "method"])?;
    for r in curve {
        w.write_record([
            r.episode.to_string(),
            r.mean_reward.to_string(),
            r.mean_rssi_dbm.to_string(),
            r.alpha.to_string(),
            r.method.tag().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Resolved configuration written next to every run's results.
pub fn write_config_echo(path: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::write(path, cfg.to_json()? + "\n")?;
    Ok(())
}

/// Trains `cfg.method`. With `out_dir` set, writes `training_curve.csv`,
/// `config_echo.json`, `checkpoint.json` and periodic `checkpoint_<episode>.json`.
pub fn run_method(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<MethodRun> {
    cfg.validate()?;
    let scene = Arc::new(cfg.scene.build()?);
    let k = cfg.env.n_users;
    let l = scene.segments.len();
    let make_checkpoint = |episodes: usize, policies: &Policies, rng: Option<&ChaCha8Rng>| Checkpoint {
        version: CHECKPOINT_VERSION,
        method: cfg.method,
        n_users: k,
        n_segments: l,
        episodes,
        seed: cfg.seed,
        train_sigma: cfg.env.noise_sigma,
        policies: policies.clone(),
        rng: rng.cloned(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_config_echo(&dir.join("config_echo.json"), cfg)?;
    }
    let out = marl::train(scene, &cfg.train_setup(), |episodes, policies, rng| {
        if let Some(dir) = out_dir {
            make_checkpoint(episodes, policies, Some(rng)).save(&dir.join(format!("checkpoint_{episodes}.json")))?;
        }
        Ok(())
    })?;
    let checkpoint = make_checkpoint(cfg.ppo.total_episodes, &out.policies, None);
    if let Some(dir) = out_dir {
        write_curve_csv(&dir.join("training_curve.csv"), &out.curve)?;
        checkpoint.save(&dir.join("checkpoint.json"))?;
    }
    Ok(MethodRun { curve: out.curve, checkpoint })
}

/// Per-step, per-user RSSI of a deterministic deployment episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub sigma: f64,
    pub seed: u64,
    /// `rssi_dbm[t][k]`
    pub rssi_dbm: Vec<Vec<f64>>,
    /// mean of the RSSI values floored at the reward floor
    pub mean_dbm: f64,
    pub std_dbm: f64,
}

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "user", "rssi_dbm", "method", "sigma"])?;
        for (t, row) in self.rssi_dbm.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                w.write_record([t.to_string(), k.to_string(), v.to_string(), self.method.tag().into(), self.sigma.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

const EVAL_STREAM: u64 = 7 << 48;

/// Runs the trained policies deterministically for `cfg.eval_horizon` steps
/// with localization noise `sigma`.
pub fn evaluate(checkpoint: &Checkpoint, cfg: &RunConfig, sigma: f64, seed: u64) -> Result<EvalReport> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be non-negative, got {sigma}")));
    }
    let scene = Arc::new(cfg.scene.build()?);
    checkpoint.check_dims(cfg.env.n_users, scene.segments.len())?;
    let mut env_cfg = cfg.env.clone();
    env_cfg.noise_sigma = sigma;
    env_cfg.episode_len = cfg.eval_horizon;
    let env = Env::new(scene, env_cfg, derive_seed(seed, EVAL_STREAM))?;
    let mut slots = [EnvSlot::new(0, env, derive_seed(seed, EVAL_STREAM + 1))];
    let mode = ActMode { method: checkpoint.method, deterministic: true, obs_scale: cfg.ppo.obs_scale };
    let batch = run_concurrent_rollouts(&mut slots, &checkpoint.policies, mode, &[0.0], cfg.eval_horizon)?;
    let rssi_dbm: Vec<Vec<f64>> = batch.trajectories[0].steps.iter().map(|r| r.rssi_dbm.clone()).collect();
    let floor = cfg.env.reward_floor_dbm;
    let vals: Vec<f64> = rssi_dbm.iter().flatten().map(|v| v.max(floor)).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    Ok(EvalReport { method: checkpoint.method, sigma, seed, rssi_dbm, mean_dbm: mean, std_dbm: std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sigma: f64,
    pub mean_dbm: f64,
    pub std_dbm: f64,
    pub final_mean_reward: f64,
}

/// Error-matched noise sweep: for every sigma, train at that noise level and
/// evaluate the resulting checkpoint at the same level.
pub fn sweep(cfg: &RunConfig, sigmas: &[f64], out_dir: Option<&Path>) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut c = cfg.clone();
        c.env.noise_sigma = sigma;
        let sub: Option<PathBuf> = out_dir.map(|d| d.join(format!("sigma_{sigma}")));
        let run = run_method(&c, sub.as_deref())?;
        let report = evaluate(&run.checkpoint, &c, sigma, c.seed)?;
        if let Some(d) = &sub {
            report.write_csv(&d.join("eval_rssi.csv"))?;
        }
        points.push(SweepPoint {
            sigma,
            mean_dbm: report.mean_dbm,
            std_dbm: report.std_dbm,
            final_mean_reward: run.final_mean_reward(100),
        });
    }
    if let Some(dir) = out_dir {
        let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
        w.write_record(["sigma", "mean_rssi_dbm", "std_rssi_dbm", "final_mean_reward"])?;
        for p in &points {
            w.write_record([p.sigma.to_string(), p.mean_dbm.to_string(), p.std_dbm.to_string(), p.final_mean_reward.to_string()])?;
        }
        w.flush()?;
    }
    Ok(points)
}

/// Coverage map as CSV: one `#` metadata line, then `ny` rows of `nx` RSSI
/// values, rows ordered by increasing y.
pub fn coverage_csv(map: &[Vec<f64>], grid: &GridSpec) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    writeln!(
        buf,
        "# x_min={} x_max={} y_min={} y_max={} nx={} ny={} height={}",
        grid.x_min, grid.x_max, grid.y_min, grid.y_max, grid.nx, grid.ny, grid.height
    )?;
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buf);
        for row in map {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
    }
    Ok(buf)
}

pub fn export_coverage_map(scene: &Scene, focals: &[Vec3], grid: &GridSpec, path: &Path) -> Result<Vec<Vec<f64>>> {
    let map = coverage_map(scene, focals, grid)?;
    std::fs::write(path, coverage_csv(&map, grid)?)?;
    Ok(map)
}
