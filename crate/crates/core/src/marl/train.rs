//! Synchronous PPO training loop: rounds of `n_envs` parallel episodes, then
//! one update per trainable level.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::critic_input;
use super::ppo::{update_central, update_focal, update_manager, CentralSamples, FocalSamples, MacroSamples};
use super::rollout::{derive_seed, run_concurrent_rollouts, step_critic_input, ActMode, EnvSlot, RolloutBatch};
use super::{compute_gae, CentralPolicy, FocalPolicy, LossStats, ManagerPolicy, Method, Policies, PpoConfig, PriorSchedule};
use crate::channel::Scene;
use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};

const INIT_STREAM: u64 = 1;
const UPDATE_STREAM: u64 = 2;
const EPISODE_STREAM: u64 = 1 << 32;
const POLICY_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub prior: PriorSchedule,
    pub method: Method,
    pub n_envs: usize,
    pub seed: u64,
    /// episodes between checkpoint callbacks; 0 disables them
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// mean per-step system reward
    pub mean_reward: f64,
    /// mean RSSI over steps and users, each value floored at the reward floor
    pub mean_rssi_dbm: f64,
    pub alpha: f64,
    pub method: Method,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policies: Policies,
    pub curve: Vec<EpisodeRecord>,
    pub focal_stats: Vec<LossStats>,
    pub manager_stats: Vec<LossStats>,
}

/// Fresh policies for `method`. Initialization order is fixed (focal, then
/// manager or central) so methods sharing a network start from the same weights.
pub fn init_policies(method: Method, n_users: usize, n_segments: usize, cfg: &PpoConfig, seed: u64) -> Result<Policies> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM));
    let mut p = Policies::default();
    match method {
        Method::NoAllocator => p.central = Some(CentralPolicy::new(n_users, n_segments, cfg, &mut rng)?),
        _ => {
            p.focal = Some(FocalPolicy::new(n_users, n_segments, cfg, &mut rng)?);
            if method != Method::Random {
                p.manager = Some(ManagerPolicy::new(n_users, n_segments, cfg, &mut rng)?);
            }
        }
    }
    Ok(p)
}

/// Effective prior schedule: `no_compat` is the allocator with the prior off.
pub fn effective_prior(method: Method, prior: &PriorSchedule) -> PriorSchedule {
    match method {
        Method::Allocator => prior.clone(),
        _ => PriorSchedule { alpha0: 0.0, ..prior.clone() },
    }
}

pub(crate) fn floored_mean_rssi(batch_rssi: impl Iterator<Item = f64>, floor: f64) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for r in batch_rssi {
        s += r.max(floor);
        n += 1;
    }
    if n == 0 {
        floor
    } else {
        s / n as f64
    }
}

fn gae_for(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    // episodes end on a time limit, so the final state is bootstrapped
    compute_gae(rewards, values, &vec![false; rewards.len()], bootstrap, gamma, lambda)
}

/// Flattens a batch into low-level PPO samples with GAE advantages.
pub fn focal_samples(batch: &RolloutBatch, policy: &FocalPolicy, k: usize, cfg: &PpoConfig) -> Result<FocalSamples> {
    let mut s = FocalSamples::default();
    for traj in &batch.trajectories {
        let mut inputs: Vec<Vec<f64>> = traj.steps.iter().map(|r| step_critic_input(r, k, cfg.obs_scale)).collect();
        inputs.push(critic_input(&traj.final_state, &traj.final_allocation, k, cfg.obs_scale));
        let values = policy.values(&inputs)?;
        let rewards: Vec<f64> = traj.steps.iter().map(|r| r.reward).collect();
        let n = rewards.len();
        let (adv, ret) = gae_for(&rewards, &values[..n], values[n], cfg.gamma, cfg.lambda)?;
        for r in &traj.steps {
            s.n_agents = r.obs.len();
            s.obs.extend_from_slice(&r.obs);
            s.actions.extend_from_slice(&r.actions);
            s.old_logp.extend_from_slice(&r.logp);
        }
        inputs.pop();
        s.critic_in.extend(inputs);
        s.advantages.extend(adv);
        s.returns.extend(ret);
    }
    Ok(s)
}

/// Macro transitions with GAE over decision steps, discount `gamma^T`.
pub fn macro_samples(batch: &RolloutBatch, policy: &ManagerPolicy, macro_period: usize, cfg: &PpoConfig) -> Result<MacroSamples> {
    let mut s = MacroSamples::default();
    let gamma = cfg.gamma.powi(macro_period as i32);
    for traj in &batch.trajectories {
        if traj.macros.is_empty() {
            continue;
        }
        let mut states: Vec<Vec<f64>> = traj.macros.iter().map(|m| m.state.clone()).collect();
        states.push(traj.final_state.clone());
        let values = policy.values(&states, cfg.obs_scale)?;
        let rewards: Vec<f64> = traj.macros.iter().map(|m| m.reward).collect();
        let n = rewards.len();
        let (adv, ret) = gae_for(&rewards, &values[..n], values[n], gamma, cfg.lambda)?;
        for m in &traj.macros {
            s.states.push(m.state.clone());
            s.prior.push(m.prior.clone());
            s.alpha.push(m.alpha);
            s.actions.push(m.action);
            s.old_logp.push(m.logp);
        }
        s.advantages.extend(adv);
        s.returns.extend(ret);
    }
    Ok(s)
}

pub fn central_samples(batch: &RolloutBatch, policy: &CentralPolicy, cfg: &PpoConfig) -> Result<CentralSamples> {
    let mut s = CentralSamples::default();
    for traj in &batch.trajectories {
        let mut states: Vec<Vec<f64>> = traj.steps.iter().map(|r| r.state.clone()).collect();
        states.push(traj.final_state.clone());
        let values = policy.values(&states, cfg.obs_scale)?;
        let rewards: Vec<f64> = traj.steps.iter().map(|r| r.reward).collect();
        let n = rewards.len();
        let (adv, ret) = gae_for(&rewards, &values[..n], values[n], cfg.gamma, cfg.lambda)?;
        states.pop();
        for r in &traj.steps {
            s.actions.push(r.actions.iter().flat_map(|a| a.iter().copied()).collect());
            s.alloc.push(r.central_alloc);
            s.old_logp.push(r.logp[0]);
        }
        s.states.extend(states);
        s.advantages.extend(adv);
        s.returns.extend(ret);
    }
    Ok(s)
}

/// Trains `setup.method` on `scene`. `on_checkpoint(episodes_done, policies, update_rng)`
/// runs every `checkpoint_every` episodes (rounded up to whole rounds).
pub fn train(
    scene: Arc<Scene>,
    setup: &TrainSetup,
    mut on_checkpoint: impl FnMut(usize, &Policies, &ChaCha8Rng) -> Result<()>,
) -> Result<TrainOutput> {
    setup.env.validate()?;
    setup.ppo.validate()?;
    setup.prior.validate()?;
    if setup.n_envs == 0 {
        return Err(Error::Config("n_envs must be at least 1".into()));
    }
    let k = setup.env.n_users;
    let l = scene.segments.len();
    let ppo = &setup.ppo;
    let prior = effective_prior(setup.method, &setup.prior);
    let mut policies = init_policies(setup.method, k, l, ppo, setup.seed)?;
    let mut update_rng = ChaCha8Rng::seed_from_u64(derive_seed(setup.seed, UPDATE_STREAM));
    let mut slots: Vec<EnvSlot> = (0..setup.n_envs)
        .map(|i| {
            let env = Env::new(scene.clone(), setup.env.clone(), derive_seed(setup.seed, EPISODE_STREAM + i as u64))?;
            Ok(EnvSlot::new(i, env, derive_seed(setup.seed, POLICY_STREAM + i as u64)))
        })
        .collect::<Result<_>>()?;
    let mode = ActMode { method: setup.method, deterministic: false, obs_scale: ppo.obs_scale };

    let total = ppo.total_episodes;
    let mut curve = Vec::with_capacity(total);
    let mut focal_stats = Vec::new();
    let mut manager_stats = Vec::new();
    let mut done = 0;
    let mut next_checkpoint = setup.checkpoint_every;
    while done < total {
        let n = setup.n_envs.min(total - done);
        let active = &mut slots[..n];
        let mut alphas = Vec::with_capacity(n);
        for (i, slot) in active.iter_mut().enumerate() {
            let ep = done + i;
            slot.env.reset(derive_seed(setup.seed, EPISODE_STREAM + ep as u64))?;
            alphas.push(prior.alpha(ep, total));
        }
        let batch = run_concurrent_rollouts(active, &policies, mode, &alphas, setup.env.episode_len)?;

        for (i, traj) in batch.trajectories.iter().enumerate() {
            let steps = traj.steps.len().max(1) as f64;
            curve.push(EpisodeRecord {
                episode: done + i,
                mean_reward: traj.steps.iter().map(|r| r.reward).sum::<f64>() / steps,
                mean_rssi_dbm: floored_mean_rssi(
                    traj.steps.iter().flat_map(|r| r.rssi_dbm.iter().copied()),
                    setup.env.reward_floor_dbm,
                ),
                alpha: alphas[i],
                method: setup.method,
            });
        }

        if let Some(focal) = policies.focal.as_mut() {
            let samples = focal_samples(&batch, focal, k, ppo)?;
            focal_stats.push(update_focal(focal, &samples, ppo, &mut update_rng)?);
        }
        if let Some(manager) = policies.manager.as_mut() {
            let samples = macro_samples(&batch, manager, setup.env.macro_period, ppo)?;
            manager_stats.push(update_manager(manager, &samples, ppo, &mut update_rng)?);
        }
        if let Some(central) = policies.central.as_mut() {
            let samples = central_samples(&batch, central, ppo)?;
            focal_stats.push(update_central(central, &samples, ppo, &mut update_rng)?);
        }
        if !policies.all_finite() {
            return Err(Error::NonFinite(format!("parameters after episode {}", done + n)));
        }

        done += n;
        if setup.checkpoint_every > 0 && (done >= next_checkpoint || done == total) {
            on_checkpoint(done, &policies, &update_rng)?;
            while next_checkpoint <= done {
                next_checkpoint += setup.checkpoint_every;
            }
        }
    }
    Ok(TrainOutput { policies, curve, focal_stats, manager_stats })
}
