//! Clipped-surrogate updates for the three trainable policy types.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use super::policy::{rows_to_array, CentralPolicy, FocalPolicy, ManagerPolicy, ValueNorm};
use super::{normalize, PpoConfig};
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, Adam, Categorical, DiagGaussian, Mlp, Tensor};

/// Per-sample clipped objective `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn surrogate(ratio: f64, adv: f64, clip: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - clip, 1.0 + clip) * adv)
}

/// Derivative of [`surrogate`] with respect to the new log-probability.
pub fn surrogate_grad(ratio: f64, adv: f64, clip: f64) -> f64 {
    if ratio * adv <= ratio.clamp(1.0 - clip, 1.0 + clip) * adv {
        ratio * adv
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// max |ratio - 1| over the first minibatch of the first epoch
    pub first_ratio_deviation: f64,
    pub updates: usize,
}

impl LossStats {
    fn finish(mut self) -> Self {
        if self.updates > 0 {
            let n = self.updates as f64;
            self.policy_loss /= n;
            self.value_loss /= n;
            self.entropy /= n;
            self.approx_kl /= n;
            self.clip_fraction /= n;
        }
        self
    }
}

/// Low-level transitions. Each step carries one row per segment agent.
#[derive(Debug, Clone, Default)]
pub struct FocalSamples {
    pub n_agents: usize,
    /// raw observations, `steps * n_agents` rows
    pub obs: Vec<[f64; 9]>,
    /// unclipped sampled displacements
    pub actions: Vec<[f64; 3]>,
    pub old_logp: Vec<f64>,
    /// one critic input per step
    pub critic_in: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl FocalSamples {
    pub fn steps(&self) -> usize {
        self.critic_in.len()
    }
}

/// Macro transitions of the allocation manager.
#[derive(Debug, Clone, Default)]
pub struct MacroSamples {
    pub states: Vec<Vec<f64>>,
    /// prior score per allocation at decision time
    pub prior: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub actions: Vec<usize>,
    pub old_logp: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Transitions of the centralized agent. `alloc` is set on steps where the
/// allocation head acted.
#[derive(Debug, Clone, Default)]
pub struct CentralSamples {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub alloc: Vec<Option<usize>>,
    pub old_logp: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Index sets for one update: `epochs` passes, each either a fixed number of
/// random minibatches or a full shuffled sweep.
fn minibatches<R: Rng + ?Sized>(n: usize, cfg: &PpoConfig, rng: &mut R) -> Vec<Vec<usize>> {
    let size = cfg.batch_size.min(n).max(1);
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        match cfg.minibatches_per_epoch {
            Some(m) => {
                for j in 0..m {
                    let start = (j * size) % n;
                    let mb: Vec<usize> = (0..size).map(|i| idx[(start + i) % n]).collect();
                    out.push(mb);
                }
            }
            None => out.extend(idx.chunks(size).map(<[usize]>::to_vec)),
        }
    }
    out
}

fn prepare_advantages(adv: &[f64], cfg: &PpoConfig) -> Vec<f64> {
    let mut a = adv.to_vec();
    if cfg.normalize_advantages {
        normalize(&mut a);
    }
    a
}

fn check_finite(what: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {x}")))
    }
}

/// One regression step of a critic towards normalized returns. Returns the loss.
fn critic_step(
    critic: &mut Mlp,
    opt: &mut Adam,
    norm: &ValueNorm,
    inputs: &Array2<f64>,
    returns: &[f64],
    cfg: &PpoConfig,
) -> Result<f64> {
    let (pred, cache) = critic.forward(inputs.view())?;
    let n = returns.len() as f64;
    let mut dout = Array2::zeros((returns.len(), 1));
    let mut loss = 0.0;
    for (i, &ret) in returns.iter().enumerate() {
        let err = pred[[i, 0]] - norm.normalize(ret);
        loss += err * err / n;
        dout[[i, 0]] = 2.0 * cfg.value_coef * err / n;
    }
    check_finite("value loss", loss)?;
    let (mut grads, _) = critic.backward(&cache, dout.view())?;
    clip_global_norm(&mut grads, cfg.max_grad_norm);
    opt.step(&mut critic.params, &grads)?;
    Ok(loss)
}

fn scaled_rows(rows: impl Iterator<Item = Vec<f64>>, width: usize, scale: f64) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = rows.map(|r| r.into_iter().map(|x| x / scale).collect()).collect();
    rows_to_array(&rows, width)
}

struct RatioTracker {
    first: bool,
    kl: f64,
    clipped: usize,
    count: usize,
    max_dev: f64,
}

impl RatioTracker {
    fn new() -> Self {
        Self { first: true, kl: 0.0, clipped: 0, count: 0, max_dev: 0.0 }
    }

    fn see(&mut self, ratio: f64, log_ratio: f64, clip: f64) {
        if self.first {
            self.max_dev = self.max_dev.max((ratio - 1.0).abs());
        }
        self.kl += (ratio - 1.0) - log_ratio;
        self.count += 1;
        if (ratio - 1.0).abs() > clip {
            self.clipped += 1;
        }
    }

    fn end_minibatch(&mut self, stats: &mut LossStats) {
        if self.count > 0 {
            stats.approx_kl += self.kl / self.count as f64;
            stats.clip_fraction += self.clipped as f64 / self.count as f64;
        }
        self.first = false;
        self.kl = 0.0;
        self.clipped = 0;
        self.count = 0;
    }
}

/// PPO update of the shared focal-point actor and the global critic.
pub fn update_focal<R: Rng + ?Sized>(
    policy: &mut FocalPolicy,
    batch: &FocalSamples,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<LossStats> {
    let backup = policy.clone();
    let result = update_focal_inner(policy, batch, cfg, rng);
    if result.is_err() || !policy.all_finite() {
        *policy = backup;
        return result.and(Err(Error::NonFinite("focal policy parameters".into())));
    }
    result
}

fn update_focal_inner<R: Rng + ?Sized>(
    policy: &mut FocalPolicy,
    batch: &FocalSamples,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<LossStats> {
    let steps = batch.steps();
    let l = batch.n_agents;
    if steps == 0 {
        return Ok(LossStats::default());
    }
    if batch.obs.len() != steps * l || batch.actions.len() != steps * l || batch.old_logp.len() != steps * l {
        return Err(Error::LengthMismatch("focal samples are ragged".into()));
    }
    policy.value_norm.update(&batch.returns);
    let adv = prepare_advantages(&batch.advantages, cfg);
    let mut stats = LossStats::default();
    let mut tracker = RatioTracker::new();
    let entropy_grad = -cfg.entropy_coef;
    for mb in minibatches(steps, cfg, rng) {
        let rows: Vec<usize> = mb.iter().flat_map(|&s| (0..l).map(move |a| s * l + a)).collect();
        let x = scaled_rows(rows.iter().map(|&r| batch.obs[r].to_vec()), 9, cfg.obs_scale)?;
        let (mean, cache) = policy.actor.forward(x.view())?;
        let n = rows.len() as f64;
        let log_std = policy.log_std.data.clone();
        let mut dmean = Array2::zeros(mean.raw_dim());
        let mut dlogstd = vec![0.0; 3];
        let mut pol = 0.0;
        for (i, &r) in rows.iter().enumerate() {
            let m = [mean[[i, 0]], mean[[i, 1]], mean[[i, 2]]];
            let g = DiagGaussian::new(&m, &log_std)?;
            let lr = g.log_prob(&batch.actions[r]) - batch.old_logp[r];
            let ratio = lr.exp();
            let a = adv[r / l];
            tracker.see(ratio, lr, cfg.clip);
            pol -= surrogate(ratio, a, cfg.clip) / n;
            let dlogp = -surrogate_grad(ratio, a, cfg.clip) / n;
            if dlogp != 0.0 {
                let (dm, ds) = g.grad_log_prob(&batch.actions[r]);
                for d in 0..3 {
                    dmean[[i, d]] = dlogp * dm[d];
                    dlogstd[d] += dlogp * ds[d];
                }
            }
        }
        let entropy = DiagGaussian::new(&[0.0; 3], &log_std)?.entropy();
        dlogstd.iter_mut().for_each(|d| *d += entropy_grad);
        tracker.end_minibatch(&mut stats);
        check_finite("policy loss", pol)?;

        let (mut grads, _) = policy.actor.backward(&cache, dmean.view())?;
        grads.push(Tensor::from_vec(&[3], dlogstd)?);
        clip_global_norm(&mut grads, cfg.max_grad_norm);
        {
            let FocalPolicy { actor, log_std, actor_opt, .. } = policy;
            let mut refs: Vec<&mut Tensor> = actor.params.iter_mut().collect();
            refs.push(log_std);
            actor_opt.step_refs(&mut refs, &grads)?;
        }

        let cx = rows_to_array(&mb.iter().map(|&s| batch.critic_in[s].clone()).collect::<Vec<_>>(), policy.critic.spec.input)?;
        let rets: Vec<f64> = mb.iter().map(|&s| batch.returns[s]).collect();
        let vl = critic_step(&mut policy.critic, &mut policy.critic_opt, &policy.value_norm, &cx, &rets, cfg)?;

        stats.policy_loss += pol;
        stats.value_loss += vl;
        stats.entropy += entropy;
        stats.updates += 1;
    }
    stats.first_ratio_deviation = tracker.max_dev;
    Ok(stats.finish())
}

/// PPO update of the allocation manager over prior-shifted distributions.
pub fn update_manager<R: Rng + ?Sized>(
    policy: &mut ManagerPolicy,
    batch: &MacroSamples,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<LossStats> {
    let backup = policy.clone();
    let result = update_manager_inner(policy, batch, cfg, rng);
    if result.is_err() || !policy.all_finite() {
        *policy = backup;
        return result.and(Err(Error::NonFinite("manager parameters".into())));
    }
    result
}

fn update_manager_inner<R: Rng + ?Sized>(
    policy: &mut ManagerPolicy,
    batch: &MacroSamples,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<LossStats> {
    let n_total = batch.states.len();
    if n_total == 0 {
        return Ok(LossStats::default());
    }
    policy.value_norm.update(&batch.returns);
    let adv = prepare_advantages(&batch.advantages, cfg);
    let mut stats = LossStats::default();
    let mut tracker = RatioTracker::new();
    for mb in minibatches(n_total, cfg, rng) {
        let n = mb.len() as f64;
        let mut grads: Vec<Tensor> = crate::nn::zeros_like(&policy.net.params);
        let mut pol = 0.0;
        let mut ent = 0.0;
        for &i in &mb {
            let scaled: Vec<f64> = batch.states[i].iter().map(|x| x / cfg.obs_scale).collect();
            let (logits, cache) = policy.net.forward(&scaled)?;
            let dist = super::allocation_distribution(&logits, &batch.prior[i], batch.alpha[i])?;
            let lr = dist.log_prob(batch.actions[i]) - batch.old_logp[i];
            let ratio = lr.exp();
            tracker.see(ratio, lr, cfg.clip);
            pol -= surrogate(ratio, adv[i], cfg.clip) / n;
            let h = dist.entropy();
            ent += h / n;
            let dlogp = -surrogate_grad(ratio, adv[i], cfg.clip) / n;
            let glp = dist.grad_log_prob(batch.actions[i]);
            let gent = dist.grad_entropy();
            let dlogits: Vec<f64> =
                glp.iter().zip(&gent).map(|(a, b)| dlogp * a - cfg.entropy_coef * b / n).collect();
            crate::nn::accumulate(&mut grads, &policy.net.backward(&cache, &dlogits)?);
        }
        tracker.end_minibatch(&mut stats);
        check_finite("manager loss", pol)?;
        clip_global_norm(&mut grads, cfg.max_grad_norm);
        policy.actor_opt.step(&mut policy.net.params, &grads)?;

        let cx = scaled_rows(mb.iter().map(|&i| batch.states[i].clone()), policy.critic.spec.input, cfg.obs_scale)?;
        let rets: Vec<f64> = mb.iter().map(|&i| batch.returns[i]).collect();
        let vl = critic_step(&mut policy.critic, &mut policy.critic_opt, &policy.value_norm, &cx, &rets, cfg)?;

        stats.policy_loss += pol;
        stats.value_loss += vl;
        stats.entropy += ent;
        stats.updates += 1;
    }
    stats.first_ratio_deviation = tracker.max_dev;
    Ok(stats.finish())
}

/// Log-probability of a centralized joint action and the pieces needed for
/// its gradient.
pub(crate) fn central_log_prob(
    out_row: &[f64],
    log_std: &[f64],
    action: &[f64],
    alloc: Option<usize>,
) -> Result<(f64, Option<Categorical>)> {
    let d = log_std.len();
    let g = DiagGaussian::new(&out_row[..d], log_std)?;
    let mut lp = g.log_prob(action);
    let cat = match alloc {
        Some(a) => {
            let c = Categorical::from_logits(&out_row[d..])?;
            lp += c.log_prob(a);
            Some(c)
        }
        None => None,
    };
    Ok((lp, cat))
}

/// PPO update of the single centralized agent.
pub fn update_central<R: Rng + ?Sized>(
    policy: &mut CentralPolicy,
    batch: &CentralSamples,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<LossStats> {
    let backup = policy.clone();
    let result = update_central_inner(policy, batch, cfg, rng);
    if result.is_err() || !policy.all_finite() {
        *policy = backup;
        return result.and(Err(Error::NonFinite("central policy parameters".into())));
    }
    result
}

fn update_central_inner<R: Rng + ?Sized>(
    policy: &mut CentralPolicy,
    batch: &CentralSamples,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<LossStats> {
    let steps = batch.states.len();
    if steps == 0 {
        return Ok(LossStats::default());
    }
    policy.value_norm.update(&batch.returns);
    let adv = prepare_advantages(&batch.advantages, cfg);
    let d = policy.action_dim();
    let width = policy.trunk.spec.input;
    let mut stats = LossStats::default();
    let mut tracker = RatioTracker::new();
    for mb in minibatches(steps, cfg, rng) {
        let x = scaled_rows(mb.iter().map(|&i| batch.states[i].clone()), width, cfg.obs_scale)?;
        let (out, cache) = policy.trunk.forward(x.view())?;
        let n = mb.len() as f64;
        let log_std = policy.log_std.data.clone();
        let mut dout = Array2::zeros(out.raw_dim());
        let mut dlogstd = vec![0.0; d];
        let mut pol = 0.0;
        let mut ent = 0.0;
        for (row, &i) in mb.iter().enumerate() {
            let o = out.row(row).to_vec();
            let (lp, cat) = central_log_prob(&o, &log_std, &batch.actions[i], batch.alloc[i])?;
            let lr = lp - batch.old_logp[i];
            let ratio = lr.exp();
            tracker.see(ratio, lr, cfg.clip);
            pol -= surrogate(ratio, adv[i], cfg.clip) / n;
            let dlogp = -surrogate_grad(ratio, adv[i], cfg.clip) / n;
            let (dm, ds) = DiagGaussian::new(&o[..d], &log_std)?.grad_log_prob(&batch.actions[i]);
            for k in 0..d {
                dout[[row, k]] = dlogp * dm[k];
                dlogstd[k] += dlogp * ds[k];
            }
            if let (Some(c), Some(a)) = (cat, batch.alloc[i]) {
                ent += c.entropy() / n;
                let glp = c.grad_log_prob(a);
                let gent = c.grad_entropy();
                for (k, (g, e)) in glp.iter().zip(&gent).enumerate() {
                    dout[[row, d + k]] = dlogp * g - cfg.entropy_coef * e / n;
                }
            }
        }
        ent += DiagGaussian::new(&vec![0.0; d], &log_std)?.entropy();
        dlogstd.iter_mut().for_each(|g| *g -= cfg.entropy_coef);
        tracker.end_minibatch(&mut stats);
        check_finite("central policy loss", pol)?;

        let (mut grads, _) = policy.trunk.backward(&cache, dout.view())?;
        grads.push(Tensor::from_vec(&[d], dlogstd)?);
        clip_global_norm(&mut grads, cfg.max_grad_norm);
        {
            let CentralPolicy { trunk, log_std, actor_opt, .. } = policy;
            let mut refs: Vec<&mut Tensor> = trunk.params.iter_mut().collect();
            refs.push(log_std);
            actor_opt.step_refs(&mut refs, &grads)?;
        }

        let rets: Vec<f64> = mb.iter().map(|&i| batch.returns[i]).collect();
        let vl = critic_step(&mut policy.critic, &mut policy.critic_opt, &policy.value_norm, &x, &rets, cfg)?;

        stats.policy_loss += pol;
        stats.value_loss += vl;
        stats.entropy += ent;
        stats.updates += 1;
    }
    stats.first_ratio_deviation = tracker.max_dev;
    Ok(stats.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_arithmetic() {
        let eps = 0.2;
        assert_eq!(surrogate(1.0, 2.5, eps), 2.5);
        assert!((surrogate(1.0 + 2.0 * eps, 3.0, eps) - (1.0 + eps) * 3.0).abs() < 1e-15);
        assert_eq!(surrogate_grad(1.0 + 2.0 * eps, 3.0, eps), 0.0);
        // negative advantage: lower ratios are clipped, higher ones are not
        assert!((surrogate(0.5, -1.0, eps) - -0.8).abs() < 1e-15);
        assert_eq!(surrogate_grad(0.5, -1.0, eps), 0.0);
        assert_eq!(surrogate_grad(1.5, -1.0, eps), -1.5);
    }

    #[test]
    fn surrogate_grad_matches_finite_difference() {
        let eps = 0.2;
        for &(lp, a) in &[(0.1f64, 1.3), (-0.05, -0.7), (0.3, -2.0), (-0.4, 0.9)] {
            let h = 1e-7;
            let fd = (surrogate((lp + h).exp(), a, eps) - surrogate((lp - h).exp(), a, eps)) / (2.0 * h);
            assert!((fd - surrogate_grad(lp.exp(), a, eps)).abs() < 1e-6);
        }
    }

    #[test]
    fn minibatch_plan() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let cfg = PpoConfig { epochs: 3, batch_size: 4, minibatches_per_epoch: None, ..PpoConfig::default() };
        let plan = minibatches(10, &cfg, &mut rng);
        assert_eq!(plan.len(), 9);
        let mut seen: Vec<usize> = plan[..3].concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let cfg = PpoConfig { epochs: 5, batch_size: 200, ..PpoConfig::default() };
        let plan = minibatches(50, &cfg, &mut rng);
        assert_eq!(plan.len(), 5);
        assert!(plan.iter().all(|mb| mb.len() == 50));
    }
}
