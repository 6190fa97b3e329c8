//! Hierarchical multi-agent environment: users walking a random-waypoint
//! pattern, noisy localization, per-segment focal points and the allocation
//! of users to segments.
//!
//! Indices are zero-based throughout: `allocation[l]` is the user served by
//! segment `l`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::Scene;
use crate::error::{Error, Result};
use crate::geometry::{compatibility_matrix, Vec3};

/// Length of a low-level observation.
pub const LOW_OBS_DIM: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub n_users: usize,
    /// m/s
    pub user_speed: f64,
    /// seconds per step
    pub dt: f64,
    /// per-axis focal displacement bound, meters
    pub delta_max: f64,
    /// steps between allocation decisions
    pub macro_period: usize,
    pub episode_len: usize,
    /// localization error standard deviation per horizontal axis, meters
    pub noise_sigma: f64,
    pub focal_init_mean: Vec3,
    /// isotropic covariance of the initial focal distribution, m^2
    pub focal_init_variance: f64,
    pub reward_floor_dbm: f64,
    /// distance normalization of the compatibility prior, meters
    pub compat_d0: f64,
    /// reject allocation changes off macro-step boundaries
    pub strict_phase: bool,
    /// start positions used on every reset instead of random ones; empty = random
    pub fixed_users: Vec<Vec3>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_users: 2,
            user_speed: 1.0,
            dt: 0.1,
            delta_max: 0.5,
            macro_period: 10,
            episode_len: 200,
            noise_sigma: 0.0,
            focal_init_mean: Vec3::new(0.0, 0.0, 1.5),
            focal_init_variance: 2.5,
            reward_floor_dbm: -90.0,
            compat_d0: 5.0,
            strict_phase: false,
            fixed_users: Vec::new(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_users == 0 {
            return bad("need at least one user");
        }
        if self.macro_period == 0 {
            return bad("macro period must be at least one step");
        }
        if self.episode_len == 0 {
            return bad("episode length must be positive");
        }
        if !(self.delta_max > 0.0 && self.delta_max.is_finite()) {
            return bad("delta_max must be positive");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("step duration must be positive");
        }
        if !(self.user_speed >= 0.0 && self.user_speed.is_finite()) {
            return bad("user speed must be non-negative");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("localization noise must be non-negative");
        }
        if !(self.focal_init_variance >= 0.0 && self.focal_init_variance.is_finite()) {
            return bad("focal init variance must be non-negative");
        }
        if !(self.compat_d0 > 0.0) {
            return bad("compat_d0 must be positive");
        }
        if !self.reward_floor_dbm.is_finite() {
            return bad("reward floor must be finite");
        }
        if !self.fixed_users.is_empty() && self.fixed_users.len() != self.n_users {
            return bad("fixed_users must list one position per user");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub users: Vec<Vec3>,
    pub observed: Vec<Vec3>,
    pub waypoints: Vec<Vec3>,
    pub focals: Vec<Vec3>,
    pub allocation: Vec<usize>,
    pub t: usize,
    pub rssi_dbm: Vec<f64>,
    /// Raw received power per user, watts.
    pub power_w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub rssi_dbm: Vec<f64>,
    /// Sum of raw received powers over users, watts.
    pub system_power_w: f64,
    pub done: bool,
}

/// Adds i.i.d. zero-mean Gaussian error of standard deviation `sigma` to the
/// x and y coordinates. Always consumes two normal draws per position so the
/// RNG stream does not depend on `sigma`.
pub fn inject_localization_noise<R: Rng + ?Sized>(truth: &[Vec3], sigma: f64, rng: &mut R) -> Vec<Vec3> {
    truth
        .iter()
        .map(|&u| {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            Vec3::new(u.x + sigma * nx, u.y + sigma * ny, u.z)
        })
        .collect()
}

/// Index of the best-scoring user per segment (ties to the lowest index).
pub fn greedy_allocation(compat: &[Vec<f64>], n_segments: usize) -> Vec<usize> {
    (0..n_segments)
        .map(|l| {
            let mut best = 0;
            for k in 1..compat.len() {
                if compat[k][l] > compat[best][l] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Env {
    scene: Arc<Scene>,
    cfg: EnvConfig,
    state: EnvState,
    normals: Vec<Vec<Option<Vec3>>>,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn new(scene: Arc<Scene>, cfg: EnvConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let placeholder = EnvState {
            users: vec![],
            observed: vec![],
            waypoints: vec![],
            focals: vec![],
            allocation: vec![],
            t: 0,
            rssi_dbm: vec![],
            power_w: vec![],
        };
        let mut env = Self {
            scene,
            cfg,
            state: placeholder,
            normals: vec![],
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.reset(seed)?;
        Ok(env)
    }

    pub fn scene(&self) -> &Arc<Scene> {
        &self.scene
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn n_users(&self) -> usize {
        self.cfg.n_users
    }

    pub fn n_segments(&self) -> usize {
        self.scene.segments.len()
    }

    /// Size of the allocation space, `K^L`.
    pub fn n_allocations(&self) -> usize {
        self.cfg.n_users.pow(self.n_segments() as u32)
    }

    pub fn high_obs_dim(&self) -> usize {
        3 * self.cfg.n_users + 6 * self.n_segments()
    }

    /// Macro-step boundary: the allocation may change before this step.
    pub fn at_macro_boundary(&self) -> bool {
        self.state.t % self.cfg.macro_period == 0
    }

    fn sample_in_region(&mut self) -> Vec3 {
        let r = self.scene.region;
        let x = self.rng.random_range(r.x_min..r.x_max);
        let y = self.rng.random_range(r.y_min..r.y_max);
        Vec3::new(x, y, self.scene.user_height)
    }

    pub fn reset(&mut self, seed: u64) -> Result<&EnvState> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.cfg.n_users;
        let l = self.n_segments();
        let mut users: Vec<Vec3> = (0..k).map(|_| self.sample_in_region()).collect();
        if !self.cfg.fixed_users.is_empty() {
            // draws above still happen so the stream does not depend on this option
            users = self.cfg.fixed_users.clone();
        }
        let waypoints: Vec<Vec3> = (0..k).map(|_| self.sample_in_region()).collect();
        let std = self.cfg.focal_init_variance.sqrt();
        let mean = self.cfg.focal_init_mean;
        let focals = (0..l)
            .map(|_| {
                let d: [f64; 3] = std::array::from_fn(|_| self.rng.sample(StandardNormal));
                mean + Vec3::new(d[0], d[1], d[2]) * std
            })
            .collect();
        let observed = inject_localization_noise(&users, self.cfg.noise_sigma, &mut self.rng);
        let compat = compatibility_matrix(&observed, &self.scene.segment_refs(), self.scene.ap, self.cfg.compat_d0)?;
        let allocation = greedy_allocation(&compat, l);
        self.state = EnvState {
            users,
            observed,
            waypoints,
            focals,
            allocation,
            t: 0,
            rssi_dbm: vec![0.0; k],
            power_w: vec![0.0; k],
        };
        self.reorient();
        self.evaluate()?;
        Ok(&self.state)
    }

    fn reorient(&mut self) {
        self.normals = (0..self.n_segments()).map(|l| self.scene.orient(l, self.state.focals[l])).collect();
    }

    /// Recomputes per-user RSSI from the current state; returns the reward.
    fn evaluate(&mut self) -> Result<f64> {
        let mut reward = 0.0;
        for k in 0..self.cfg.n_users {
            let serving: Vec<(usize, &[Option<Vec3>])> = self
                .state
                .allocation
                .iter()
                .enumerate()
                .filter(|&(_, &b)| b == k)
                .map(|(l, _)| (l, self.normals[l].as_slice()))
                .collect();
            let rx = self.scene.received(self.state.users[k], &serving)?;
            self.state.rssi_dbm[k] = rx.rssi_dbm;
            self.state.power_w[k] = rx.watts;
            reward += (rx.rssi_dbm - self.cfg.reward_floor_dbm).max(0.0);
        }
        Ok(reward)
    }

    fn move_users(&mut self) {
        let step = self.cfg.user_speed * self.cfg.dt;
        if step == 0.0 {
            return;
        }
        for k in 0..self.cfg.n_users {
            let mut remaining = step;
            // walk through waypoints until this step's distance is used up
            loop {
                let u = self.state.users[k];
                let to = self.state.waypoints[k] - u;
                let dist = to.norm();
                if dist > remaining {
                    self.state.users[k] = u + to * (remaining / dist);
                    break;
                }
                self.state.users[k] = self.state.waypoints[k];
                remaining -= dist;
                self.state.waypoints[k] = self.sample_in_region();
                if remaining <= 0.0 {
                    break;
                }
            }
        }
    }

    /// Applies one displacement per segment, advances users and noise, and
    /// returns the shaped system reward.
    pub fn step(&mut self, actions: &[Vec3]) -> Result<StepOutcome> {
        let l = self.n_segments();
        if actions.len() != l {
            return Err(Error::ActionShape { expected: l, got: actions.len() });
        }
        if let Some(a) = actions.iter().find(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("action {a:?}")));
        }
        let dm = self.cfg.delta_max;
        for (f, a) in self.state.focals.iter_mut().zip(actions) {
            *f += Vec3::new(a.x.clamp(-dm, dm), a.y.clamp(-dm, dm), a.z.clamp(-dm, dm));
        }
        self.move_users();
        self.state.observed = inject_localization_noise(&self.state.users, self.cfg.noise_sigma, &mut self.rng);
        self.reorient();
        let reward = self.evaluate()?;
        self.state.t += 1;
        Ok(StepOutcome {
            reward,
            rssi_dbm: self.state.rssi_dbm.clone(),
            system_power_w: self.state.power_w.iter().sum(),
            done: self.state.t >= self.cfg.episode_len,
        })
    }

    pub fn set_allocation(&mut self, allocation: &[usize]) -> Result<()> {
        let l = self.n_segments();
        if allocation.len() != l {
            return Err(Error::ShapeMismatch(format!("allocation of length {} for {l} segments", allocation.len())));
        }
        if let Some(&b) = allocation.iter().find(|&&b| b >= self.cfg.n_users) {
            return Err(Error::Index { index: b, len: self.cfg.n_users });
        }
        if self.cfg.strict_phase && !self.at_macro_boundary() {
            return Err(Error::Phase(self.state.t));
        }
        self.state.allocation.copy_from_slice(allocation);
        self.evaluate()?;
        Ok(())
    }

    /// Global state: observed users, segment references, focal points.
    pub fn observe_high(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.high_obs_dim());
        for u in &self.state.observed {
            v.extend_from_slice(&u.to_array());
        }
        for seg in &self.scene.segments {
            v.extend_from_slice(&seg.reference().to_array());
        }
        for f in &self.state.focals {
            v.extend_from_slice(&f.to_array());
        }
        v
    }

    /// Masked local view of segment `l`: its assigned user, itself, its focal point.
    pub fn observe_low(&self, l: usize) -> Result<[f64; LOW_OBS_DIM]> {
        let n = self.n_segments();
        if l >= n {
            return Err(Error::Index { index: l, len: n });
        }
        let u = self.state.observed[self.state.allocation[l]];
        let r = self.scene.segments[l].reference();
        let f = self.state.focals[l];
        Ok([u.x, u.y, u.z, r.x, r.y, r.z, f.x, f.y, f.z])
    }

    /// Compatibility matrix of the observed users against every segment.
    pub fn compatibility(&self) -> Result<Vec<Vec<f64>>> {
        compatibility_matrix(&self.state.observed, &self.scene.segment_refs(), self.scene.ap, self.cfg.compat_d0)
    }

    /// Overrides positions for tests and scripted evaluations.
    pub fn place(&mut self, users: &[Vec3], focals: &[Vec3]) -> Result<()> {
        if users.len() != self.cfg.n_users || focals.len() != self.n_segments() {
            return Err(Error::ShapeMismatch("placement sizes do not match the scene".into()));
        }
        self.state.users = users.to_vec();
        self.state.waypoints = users.to_vec();
        self.state.observed = users.to_vec();
        self.state.focals = focals.to_vec();
        self.reorient();
        self.evaluate()?;
        Ok(())
    }
}
