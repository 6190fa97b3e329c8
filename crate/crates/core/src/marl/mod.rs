//! Hierarchical MAPPO: GAE, clipped-surrogate updates for the allocation
//! manager and the focal-point agents, and the compatibility prior.

mod policy;
mod ppo;
mod rollout;
mod train;

pub use policy::{critic_dim, critic_input, CentralPolicy, FocalPolicy, ManagerPolicy, Policies, ValueNorm};
pub use ppo::{
    surrogate, surrogate_grad, update_central, update_focal, update_manager, CentralSamples, FocalSamples, LossStats,
    MacroSamples,
};
pub use rollout::{
    derive_seed, run_concurrent_rollouts, ActMode, EnvSlot, MacroRecord, RolloutBatch, StepRecord, Trajectory,
};
pub use train::{
    central_samples, effective_prior, focal_samples, init_policies, macro_samples, train, EpisodeRecord, TrainOutput,
    TrainSetup,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Categorical;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Learned allocator with the compatibility prior.
    Allocator,
    /// Learned allocator without the prior.
    NoCompat,
    /// One centralized PPO agent over the full state.
    NoAllocator,
    /// Uniformly random allocation, learned focal agents.
    Random,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Allocator, Method::NoCompat, Method::NoAllocator, Method::Random];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Allocator => "allocator",
            Method::NoCompat => "no_compat",
            Method::NoAllocator => "no_allocator",
            Method::Random => "random",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// optimization passes per collected batch
    pub epochs: usize,
    /// samples per gradient step
    pub batch_size: usize,
    /// minibatches drawn per epoch; `None` sweeps the whole buffer
    pub minibatches_per_epoch: Option<usize>,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub total_episodes: usize,
    pub normalize_advantages: bool,
    pub init_log_std: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub manager_critic_hidden: Vec<usize>,
    /// positions are divided by this before entering any network, meters
    pub obs_scale: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.985,
            lambda: 0.9,
            clip: 0.2,
            value_coef: 1.0,
            entropy_coef: 1.0e-4,
            epochs: 40,
            batch_size: 200,
            minibatches_per_epoch: Some(1),
            lr: 2.0e-4,
            max_grad_norm: 0.5,
            total_episodes: 800,
            normalize_advantages: true,
            init_log_std: 0.3f64.ln(),
            actor_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            manager_critic_hidden: vec![128, 128],
            obs_scale: 5.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.total_episodes == 0 {
            return bad("epochs, batch size and episode count must be positive".into());
        }
        if self.minibatches_per_epoch == Some(0) {
            return bad("minibatches_per_epoch must be positive".into());
        }
        if !(self.lr > 0.0 && self.max_grad_norm > 0.0 && self.obs_scale > 0.0) {
            return bad("lr, max_grad_norm and obs_scale must be positive".into());
        }
        Ok(())
    }
}

/// Linearly decaying weight of the compatibility prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSchedule {
    pub alpha0: f64,
    /// cutoff episode as a fraction of the total episode budget
    pub cutoff_fraction: f64,
}

impl Default for PriorSchedule {
    fn default() -> Self {
        Self { alpha0: 5.0, cutoff_fraction: 0.4 }
    }
}

impl PriorSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 >= 0.0 && self.alpha0.is_finite()) || !(self.cutoff_fraction >= 0.0) {
            return Err(Error::Config("prior weight and cutoff must be non-negative".into()));
        }
        Ok(())
    }

    pub fn cutoff_episode(&self, total_episodes: usize) -> f64 {
        self.cutoff_fraction * total_episodes as f64
    }

    pub fn alpha(&self, episode: usize, total_episodes: usize) -> f64 {
        let cut = self.cutoff_episode(total_episodes);
        if self.alpha0 == 0.0 || (episode as f64) >= cut {
            return 0.0;
        }
        self.alpha0 * (1.0 - episode as f64 / cut).max(0.0)
    }
}

/// Generalized advantage estimation over one trajectory. `bootstrap` is the
/// value of the state following the last transition.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::LengthMismatch(format!(
            "rewards {n}, values {}, dones {}",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shift to zero mean and scale to unit (population) standard deviation.
pub fn normalize(values: &mut [f64]) {
    let n = values.len() as f64;
    if values.len() < 2 {
        return;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    values.iter_mut().for_each(|v| *v = (*v - mean) / std);
}

/// Allocation index -> user per segment (`index = sum_l b_l K^l`).
pub fn decode_allocation(index: usize, n_users: usize, n_segments: usize) -> Vec<usize> {
    let mut rest = index;
    (0..n_segments)
        .map(|_| {
            let b = rest % n_users;
            rest /= n_users;
            b
        })
        .collect()
}

pub fn encode_allocation(allocation: &[usize], n_users: usize) -> usize {
    allocation.iter().rev().fold(0, |acc, &b| acc * n_users + b)
}

/// Prior score of every allocation: the summed compatibility of the user
/// each segment would serve.
pub fn prior_scores(compat: &[Vec<f64>], n_segments: usize) -> Vec<f64> {
    let k = compat.len();
    let n = k.pow(n_segments as u32);
    (0..n)
        .map(|i| {
            decode_allocation(i, k, n_segments)
                .iter()
                .enumerate()
                .map(|(l, &b)| compat[b][l])
                .sum()
        })
        .collect()
}

/// Allocation distribution `softmax(logits + alpha * prior)`. With
/// `alpha == 0` the prior is skipped entirely.
pub fn allocation_distribution(logits: &[f64], prior: &[f64], alpha: f64) -> Result<Categorical> {
    if logits.len() != prior.len() {
        return Err(Error::ShapeMismatch(format!("{} logits vs {} prior scores", logits.len(), prior.len())));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("prior weight must be non-negative, got {alpha}")));
    }
    if alpha == 0.0 {
        return Categorical::from_logits(logits);
    }
    let shifted: Vec<f64> = logits.iter().zip(prior).map(|(l, p)| l + alpha * p).collect();
    Categorical::from_logits(&shifted)
}

/// Samples an allocation from the prior-shifted manager policy.
pub fn select_allocation<R: Rng + ?Sized>(
    logits: &[f64],
    compat: &[Vec<f64>],
    n_segments: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<(usize, f64)> {
    if compat.iter().any(|row| row.len() != n_segments) {
        return Err(Error::ShapeMismatch("compatibility matrix must be K x L".into()));
    }
    let prior = prior_scores(compat, n_segments);
    let dist = allocation_distribution(logits, &prior, alpha)?;
    let a = dist.sample(rng);
    Ok((a, dist.log_prob(a)))
}
