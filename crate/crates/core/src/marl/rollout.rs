//! Synchronous multi-environment rollouts. Every live environment advances
//! exactly one step per tick; policy forwards are batched across
//! environments and sampling uses each environment's own RNG stream, so the
//! result does not depend on worker scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::policy::critic_input;
use super::{allocation_distribution, decode_allocation, prior_scores, Method, Policies};
use crate::env::{Env, LOW_OBS_DIM};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::nn::{Categorical, DiagGaussian};

/// SplitMix64 finalizer used to derive independent seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One environment plus the RNG stream its agents sample from.
#[derive(Debug, Clone)]
pub struct EnvSlot {
    pub id: usize,
    pub seed: u64,
    pub env: Env,
    pub rng: ChaCha8Rng,
}

impl EnvSlot {
    pub fn new(id: usize, env: Env, policy_seed: u64) -> Self {
        let seed = policy_seed;
        Self { id, seed, env, rng: ChaCha8Rng::seed_from_u64(policy_seed) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub env_id: usize,
    pub t: usize,
    /// global state before acting
    pub state: Vec<f64>,
    pub allocation: Vec<usize>,
    /// per-agent local observations (hierarchical methods)
    pub obs: Vec<[f64; LOW_OBS_DIM]>,
    /// unclipped sampled displacements, one row per segment
    pub actions: Vec<[f64; 3]>,
    /// per-agent log-probabilities; the centralized agent stores one joint value
    pub logp: Vec<f64>,
    /// allocation chosen by the centralized agent on this step
    pub central_alloc: Option<usize>,
    pub reward: f64,
    pub rssi_dbm: Vec<f64>,
    pub system_power_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroRecord {
    pub env_id: usize,
    pub t: usize,
    pub state: Vec<f64>,
    pub prior: Vec<f64>,
    pub alpha: f64,
    pub action: usize,
    pub logp: f64,
    /// undiscounted reward sum until the next decision
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub env_id: usize,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub macros: Vec<MacroRecord>,
    pub final_state: Vec<f64>,
    pub final_allocation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    /// env id of every transition in collection order
    pub order: Vec<usize>,
}

impl RolloutBatch {
    pub fn transitions(&self) -> usize {
        self.order.len()
    }
}

/// How agents act during a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActMode {
    pub method: Method,
    /// use distribution modes instead of samples
    pub deterministic: bool,
    pub obs_scale: f64,
}

fn worker_err(slot: &EnvSlot, e: Error) -> Error {
    Error::WorkerFailure { env_id: slot.id, seed: slot.seed, source: Box::new(e) }
}

/// Advances every slot `steps` times from its current state. `alphas[i]` is
/// the prior weight used by slot `i`.
pub fn run_concurrent_rollouts(
    slots: &mut [EnvSlot],
    policies: &Policies,
    mode: ActMode,
    alphas: &[f64],
    steps: usize,
) -> Result<RolloutBatch> {
    if slots.is_empty() {
        return Err(Error::Config("need at least one environment".into()));
    }
    if alphas.len() != slots.len() {
        return Err(Error::LengthMismatch(format!("{} prior weights for {} environments", alphas.len(), slots.len())));
    }
    let k = slots[0].env.n_users();
    let l = slots[0].env.n_segments();
    let mut trajs: Vec<Trajectory> = slots
        .iter()
        .map(|s| Trajectory {
            env_id: s.id,
            seed: s.seed,
            steps: Vec::with_capacity(steps),
            macros: Vec::new(),
            final_state: Vec::new(),
            final_allocation: Vec::new(),
        })
        .collect();
    let mut order = Vec::with_capacity(steps * slots.len());

    for _ in 0..steps {
        // high level
        let mut central_alloc = vec![None; slots.len()];
        let mut central_out: Option<ndarray::Array2<f64>> = None;
        if mode.method == Method::NoAllocator {
            let central = policies.central.as_ref().ok_or_else(|| Error::Config("missing centralized policy".into()))?;
            let states: Vec<Vec<f64>> = slots.iter().map(|s| s.env.observe_high()).collect();
            central_out = Some(central.outputs(&states, mode.obs_scale)?);
        }
        for (i, slot) in slots.iter_mut().enumerate() {
            if !slot.env.at_macro_boundary() {
                continue;
            }
            let state = slot.env.observe_high();
            let n_alloc = slot.env.n_allocations();
            let (action, logp, prior, alpha) = match mode.method {
                Method::Allocator | Method::NoCompat => {
                    let manager =
                        policies.manager.as_ref().ok_or_else(|| Error::Config("missing manager policy".into()))?;
                    let compat = slot.env.compatibility().map_err(|e| worker_err(slot, e))?;
                    let prior = prior_scores(&compat, l);
                    let logits = manager.logits(&state, mode.obs_scale)?;
                    let dist = allocation_distribution(&logits, &prior, alphas[i])?;
                    let a = if mode.deterministic { dist.mode() } else { dist.sample(&mut slot.rng) };
                    (a, dist.log_prob(a), prior, alphas[i])
                }
                Method::Random => {
                    let dist = Categorical::from_logits(&vec![0.0; n_alloc])?;
                    let a = dist.sample(&mut slot.rng);
                    (a, dist.log_prob(a), vec![0.0; n_alloc], 0.0)
                }
                Method::NoAllocator => {
                    let out = central_out.as_ref().expect("central outputs computed above");
                    let logits: Vec<f64> = out.row(i).iter().skip(3 * l).copied().collect();
                    let dist = Categorical::from_logits(&logits)?;
                    let a = if mode.deterministic { dist.mode() } else { dist.sample(&mut slot.rng) };
                    central_alloc[i] = Some(a);
                    (a, dist.log_prob(a), vec![0.0; n_alloc], 0.0)
                }
            };
            slot.env.set_allocation(&decode_allocation(action, k, l)).map_err(|e| worker_err(slot, e))?;
            trajs[i].macros.push(MacroRecord {
                env_id: slot.id,
                t: slot.env.state().t,
                state,
                prior,
                alpha,
                action,
                logp,
                reward: 0.0,
            });
        }

        // low level
        let mut records: Vec<StepRecord> = slots
            .iter()
            .zip(&central_alloc)
            .map(|(s, &ca)| StepRecord {
                env_id: s.id,
                t: s.env.state().t,
                state: s.env.observe_high(),
                allocation: s.env.state().allocation.clone(),
                obs: Vec::new(),
                actions: Vec::new(),
                logp: Vec::new(),
                central_alloc: ca,
                reward: 0.0,
                rssi_dbm: Vec::new(),
                system_power_w: 0.0,
            })
            .collect();
        if mode.method == Method::NoAllocator {
            let central = policies.central.as_ref().expect("checked above");
            let out = central_out.as_ref().expect("central outputs computed above");
            let log_std = &central.log_std.data;
            for (i, slot) in slots.iter_mut().enumerate() {
                let row: Vec<f64> = out.row(i).to_vec();
                let g = DiagGaussian::new(&row[..3 * l], log_std)?;
                let a = if mode.deterministic { row[..3 * l].to_vec() } else { g.sample(&mut slot.rng) };
                let (lp, _) = super::ppo::central_log_prob(&row, log_std, &a, central_alloc[i])?;
                records[i].actions = a.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                records[i].logp = vec![lp];
            }
        } else {
            let focal = policies.focal.as_ref().ok_or_else(|| Error::Config("missing focal policy".into()))?;
            let mut obs = Vec::with_capacity(slots.len() * l);
            for slot in slots.iter() {
                for seg in 0..l {
                    obs.push(slot.env.observe_low(seg).map_err(|e| worker_err(slot, e))?);
                }
            }
            let means = focal.means(&obs, mode.obs_scale)?;
            let log_std = &focal.log_std.data;
            for (i, slot) in slots.iter_mut().enumerate() {
                for seg in 0..l {
                    let r = i * l + seg;
                    let m = [means[[r, 0]], means[[r, 1]], means[[r, 2]]];
                    let g = DiagGaussian::new(&m, log_std)?;
                    let a = if mode.deterministic { m.to_vec() } else { g.sample(&mut slot.rng) };
                    records[i].logp.push(g.log_prob(&a));
                    records[i].actions.push([a[0], a[1], a[2]]);
                    records[i].obs.push(obs[r]);
                }
            }
        }

        // synchronous step of every environment
        let outcomes: Vec<Result<crate::env::StepOutcome>> = slots
            .par_iter_mut()
            .zip(records.par_iter())
            .map(|(slot, rec)| {
                let acts: Vec<Vec3> = rec.actions.iter().map(|a| Vec3::new(a[0], a[1], a[2])).collect();
                slot.env.step(&acts).map_err(|e| worker_err(slot, e))
            })
            .collect();
        for ((i, out), mut rec) in outcomes.into_iter().enumerate().zip(records) {
            let out = out?;
            rec.reward = out.reward;
            rec.rssi_dbm = out.rssi_dbm;
            rec.system_power_w = out.system_power_w;
            if let Some(m) = trajs[i].macros.last_mut() {
                m.reward += out.reward;
            }
            order.push(rec.env_id);
            trajs[i].steps.push(rec);
        }
    }
    for (traj, slot) in trajs.iter_mut().zip(slots.iter()) {
        traj.final_state = slot.env.observe_high();
        traj.final_allocation = slot.env.state().allocation.clone();
    }
    Ok(RolloutBatch { trajectories: trajs, order })
}

/// Critic input of a recorded step for the hierarchical methods.
pub fn step_critic_input(rec: &StepRecord, n_users: usize, scale: f64) -> Vec<f64> {
    critic_input(&rec.state, &rec.allocation, n_users, scale)
}
