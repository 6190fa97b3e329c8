use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PpoConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, Manager, ManagerSpec, Mlp, MlpSpec, Tensor};

/// Running mean/variance of value targets; critics regress normalized targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNorm {
    pub beta: f64,
    pub running_mean: f64,
    pub running_sq: f64,
    pub debias: f64,
}

impl Default for ValueNorm {
    fn default() -> Self {
        Self { beta: 0.95, running_mean: 0.0, running_sq: 0.0, debias: 0.0 }
    }
}

impl ValueNorm {
    pub fn update(&mut self, targets: &[f64]) {
        if targets.is_empty() {
            return;
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let sq = targets.iter().map(|t| t * t).sum::<f64>() / n;
        self.running_mean = self.beta * self.running_mean + (1.0 - self.beta) * mean;
        self.running_sq = self.beta * self.running_sq + (1.0 - self.beta) * sq;
        self.debias = self.beta * self.debias + (1.0 - self.beta);
    }

    pub fn mean(&self) -> f64 {
        if self.debias > 0.0 {
            self.running_mean / self.debias
        } else {
            0.0
        }
    }

    pub fn std(&self) -> f64 {
        if self.debias > 0.0 {
            let m = self.mean();
            (self.running_sq / self.debias - m * m).max(1e-4).sqrt()
        } else {
            1.0
        }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean()) / self.std()
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        y * self.std() + self.mean()
    }
}

/// Critic input: scaled global state followed by a one-hot of the current
/// allocation per segment.
pub fn critic_input(state: &[f64], allocation: &[usize], n_users: usize, scale: f64) -> Vec<f64> {
    let mut v: Vec<f64> = state.iter().map(|x| x / scale).collect();
    for &b in allocation {
        v.extend((0..n_users).map(|k| if k == b { 1.0 } else { 0.0 }));
    }
    v
}

pub fn critic_dim(n_users: usize, n_segments: usize) -> usize {
    3 * n_users + 6 * n_segments + n_users * n_segments
}

pub(crate) fn rows_to_array(rows: &[Vec<f64>], width: usize) -> Result<Array2<f64>> {
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

fn values_from(critic: &Mlp, norm: &ValueNorm, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
    Ok(critic.predict(inputs)?.column(0).iter().map(|&y| norm.denormalize(y)).collect())
}

/// Shared focal-point actor for every segment plus the global critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalPolicy {
    pub actor: Mlp,
    pub log_std: Tensor,
    pub critic: Mlp,
    pub value_norm: ValueNorm,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl FocalPolicy {
    pub fn new<R: Rng + ?Sized>(n_users: usize, n_segments: usize, cfg: &PpoConfig, rng: &mut R) -> Result<Self> {
        let actor = Mlp::new(MlpSpec::new(crate::env::LOW_OBS_DIM, &cfg.actor_hidden, 3).with_output_gain(0.01), rng)?;
        let critic = Mlp::new(MlpSpec::new(critic_dim(n_users, n_segments), &cfg.critic_hidden, 1), rng)?;
        let log_std = Tensor::from_vec(&[3], vec![cfg.init_log_std; 3])?;
        let mut actor_params = actor.params.clone();
        actor_params.push(log_std.clone());
        Ok(Self {
            actor_opt: Adam::new(&actor_params, cfg.lr),
            critic_opt: Adam::new(&critic.params, cfg.lr),
            actor,
            log_std,
            critic,
            value_norm: ValueNorm::default(),
        })
    }

    /// Displacement means for raw 9-vector observations (one per row).
    pub fn means(&self, obs: &[[f64; 9]], scale: f64) -> Result<Array2<f64>> {
        let rows: Vec<Vec<f64>> = obs.iter().map(|o| o.iter().map(|x| x / scale).collect()).collect();
        self.actor.predict(rows_to_array(&rows, 9)?.view())
    }

    pub fn values(&self, critic_inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let x = rows_to_array(critic_inputs, self.critic.spec.input)?;
        values_from(&self.critic, &self.value_norm, x.view())
    }

    pub fn all_finite(&self) -> bool {
        crate::nn::all_finite(&self.actor.params) && self.log_std.all_finite() && crate::nn::all_finite(&self.critic.params)
    }
}

/// Allocation manager (attention network) and its own critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManagerPolicy {
    pub net: Manager,
    pub critic: Mlp,
    pub value_norm: ValueNorm,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl ManagerPolicy {
    pub fn new<R: Rng + ?Sized>(n_users: usize, n_segments: usize, cfg: &PpoConfig, rng: &mut R) -> Result<Self> {
        let spec = ManagerSpec::new(n_users, n_segments);
        let net = Manager::new(spec.clone(), 0.01, rng)?;
        let critic = Mlp::new(MlpSpec::new(spec.state_dim(), &cfg.manager_critic_hidden, 1), rng)?;
        Ok(Self {
            actor_opt: Adam::new(&net.params, cfg.lr),
            critic_opt: Adam::new(&critic.params, cfg.lr),
            net,
            critic,
            value_norm: ValueNorm::default(),
        })
    }

    pub fn logits(&self, state: &[f64], scale: f64) -> Result<Vec<f64>> {
        let scaled: Vec<f64> = state.iter().map(|x| x / scale).collect();
        self.net.logits(&scaled)
    }

    pub fn values(&self, states: &[Vec<f64>], scale: f64) -> Result<Vec<f64>> {
        let rows: Vec<Vec<f64>> = states.iter().map(|s| s.iter().map(|x| x / scale).collect()).collect();
        let x = rows_to_array(&rows, self.critic.spec.input)?;
        values_from(&self.critic, &self.value_norm, x.view())
    }

    pub fn all_finite(&self) -> bool {
        crate::nn::all_finite(&self.net.params) && crate::nn::all_finite(&self.critic.params)
    }
}

/// Single centralized agent: full state in, every segment's displacement
/// and an allocation head out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralPolicy {
    pub n_users: usize,
    pub n_segments: usize,
    pub trunk: Mlp,
    pub log_std: Tensor,
    pub critic: Mlp,
    pub value_norm: ValueNorm,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl CentralPolicy {
    pub fn new<R: Rng + ?Sized>(n_users: usize, n_segments: usize, cfg: &PpoConfig, rng: &mut R) -> Result<Self> {
        let n_alloc = n_users.pow(n_segments as u32);
        let state_dim = 3 * n_users + 6 * n_segments;
        let trunk = Mlp::new(MlpSpec::new(state_dim, &cfg.actor_hidden, 3 * n_segments + n_alloc).with_output_gain(0.01), rng)?;
        // the allocation is part of this agent's action, so its critic sees the state alone
        let critic = Mlp::new(MlpSpec::new(state_dim, &cfg.critic_hidden, 1), rng)?;
        let log_std = Tensor::from_vec(&[3 * n_segments], vec![cfg.init_log_std; 3 * n_segments])?;
        let mut actor_params = trunk.params.clone();
        actor_params.push(log_std.clone());
        Ok(Self {
            n_users,
            n_segments,
            actor_opt: Adam::new(&actor_params, cfg.lr),
            critic_opt: Adam::new(&critic.params, cfg.lr),
            trunk,
            log_std,
            critic,
            value_norm: ValueNorm::default(),
        })
    }

    pub fn action_dim(&self) -> usize {
        3 * self.n_segments
    }

    /// Raw outputs per state row: `[means (3L) | allocation logits (K^L)]`.
    pub fn outputs(&self, states: &[Vec<f64>], scale: f64) -> Result<Array2<f64>> {
        let rows: Vec<Vec<f64>> = states.iter().map(|s| s.iter().map(|x| x / scale).collect()).collect();
        self.trunk.predict(rows_to_array(&rows, self.trunk.spec.input)?.view())
    }

    pub fn values(&self, states: &[Vec<f64>], scale: f64) -> Result<Vec<f64>> {
        let rows: Vec<Vec<f64>> = states.iter().map(|s| s.iter().map(|x| x / scale).collect()).collect();
        let x = rows_to_array(&rows, self.critic.spec.input)?;
        values_from(&self.critic, &self.value_norm, x.view())
    }

    pub fn all_finite(&self) -> bool {
        crate::nn::all_finite(&self.trunk.params) && self.log_std.all_finite() && crate::nn::all_finite(&self.critic.params)
    }
}

/// Everything trainable for one method.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Policies {
    pub focal: Option<FocalPolicy>,
    pub manager: Option<ManagerPolicy>,
    pub central: Option<CentralPolicy>,
}

impl Policies {
    pub fn all_finite(&self) -> bool {
        self.focal.as_ref().is_none_or(FocalPolicy::all_finite)
            && self.manager.as_ref().is_none_or(ManagerPolicy::all_finite)
            && self.central.as_ref().is_none_or(CentralPolicy::all_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_norm_tracks_batches() {
        let mut n = ValueNorm::default();
        assert_eq!(n.normalize(3.0), 3.0);
        n.update(&[10.0, 20.0, 30.0]);
        assert!((n.mean() - 20.0).abs() < 1e-12);
        assert!((n.std() - (200.0f64 / 3.0).sqrt()).abs() < 1e-9);
        assert!((n.denormalize(n.normalize(7.5)) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn critic_input_layout() {
        let v = critic_input(&[5.0; 18], &[1, 0], 2, 5.0);
        assert_eq!(v.len(), critic_dim(2, 2));
        assert_eq!(&v[18..], &[0.0, 1.0, 1.0, 0.0]);
        assert!(v[..18].iter().all(|&x| x == 1.0));
    }
}
