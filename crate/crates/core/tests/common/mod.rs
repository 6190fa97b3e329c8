#![allow(dead_code)]

use hmarl::channel::{received_power, ChannelConfig, TileModel};
use hmarl::geometry::{tile_centers, tile_normal, SegmentSpec, Vec3};
use hmarl::harness::SceneConfig;
use hmarl::nn::{Manager, ManagerSpec, Mlp, MlpSpec, Tensor};
use num_complex::Complex64;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// entries whose one-sided differences disagree (a ReLU kink inside the stencil)
    pub skipped: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.worst < tol && self.skipped * 100 <= self.checked
    }
}

/// Compares `analytic` with central differences of `loss` over a random
/// subset of at most `per_tensor` entries of every tensor.
pub fn check_entries(
    params: &mut [Tensor],
    analytic: &[Tensor],
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
    loss: &mut dyn FnMut(&[Tensor]) -> f64,
    report: &mut GradCheck,
) {
    let f0 = loss(params);
    for ti in 0..params.len() {
        let n = params[ti].data.len();
        let picks: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { (0..per_tensor).map(|_| rng.random_range(0..n)).collect() };
        for i in picks {
            let orig = params[ti].data[i];
            params[ti].data[i] = orig + FD_STEP;
            let fp = loss(params);
            params[ti].data[i] = orig - FD_STEP;
            let fm = loss(params);
            params[ti].data[i] = orig;
            let fwd = (fp - f0) / FD_STEP;
            let bwd = (f0 - fm) / FD_STEP;
            let scale = fwd.abs().max(bwd.abs()).max(1e-6);
            if (fwd - bwd).abs() > 1e-3 * scale {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[ti].data[i];
            let denom = a.abs().max(numeric.abs());
            let err = if denom < 1e-7 { (a - numeric).abs() } else { (a - numeric).abs() / denom };
            report.checked += 1;
            report.worst = report.worst.max(err);
        }
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Gradient check of an MLP under a random linear functional of its output.
pub fn mlp_gradcheck(input: usize, hidden: &[usize], output: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mlp = Mlp::new(MlpSpec::new(input, hidden, output), &mut rng).unwrap();
    let x = random_matrix(4, input, &mut rng);
    let w = random_matrix(4, output, &mut rng);
    let (_, cache) = mlp.forward(x.view()).unwrap();
    let (grads, _) = mlp.backward(&cache, w.view()).unwrap();
    let mut params = mlp.params.clone();
    let spec = mlp.spec.clone();
    let mut loss = |p: &[Tensor]| {
        let m = Mlp { spec: spec.clone(), params: p.to_vec() };
        (m.predict(x.view()).unwrap() * &w).sum()
    };
    let mut report = GradCheck::default();
    check_entries(&mut params, &grads, 40, &mut rng, &mut loss, &mut report);
    report
}

/// Gradient check of the allocation manager under a random linear functional
/// of its logits.
pub fn manager_gradcheck(n_users: usize, n_segments: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ManagerSpec::new(n_users, n_segments);
    let net = Manager::new(spec.clone(), 1.0, &mut rng).unwrap();
    let state: Vec<f64> = (0..spec.state_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..spec.n_allocations()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, cache) = net.forward(&state).unwrap();
    let grads = net.backward(&cache, &w).unwrap();
    let mut params = net.params.clone();
    let mut loss = |p: &[Tensor]| {
        let m = Manager { spec: spec.clone(), params: p.to_vec() };
        m.logits(&state).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let mut report = GradCheck::default();
    check_entries(&mut params, &grads, 60, &mut rng, &mut loss, &mut report);
    report
}

/// Advantage by direct summation of discounted rewards up to the first done
/// (or the bootstrap value past the end), minus the baseline.
pub fn discounted_advantage(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let mut g = 0.0;
            let mut disc = 1.0;
            let mut cut = false;
            for j in t..n {
                g += disc * rewards[j];
                disc *= gamma;
                if dones[j] {
                    cut = true;
                    break;
                }
            }
            if !cut {
                g += disc * bootstrap;
            }
            g - values[t]
        })
        .collect()
}

/// One-step TD residuals.
pub fn td_residuals(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64) -> Vec<f64> {
    (0..rewards.len())
        .map(|t| {
            let next = if t + 1 < rewards.len() { values[t + 1] } else { bootstrap };
            let live = if dones[t] { 0.0 } else { 1.0 };
            rewards[t] + gamma * next * live - values[t]
        })
        .collect()
}

/// Two-armed bandit through the allocation manager (one segment, two users):
/// arm 1 pays 1, arm 0 pays 0. Returns the probability of arm 1 after each
/// update, stopping early once it reaches `target`.
pub fn bandit_curve(updates: usize, target: f64, seed: u64) -> Vec<f64> {
    use hmarl::marl::{allocation_distribution, update_manager, MacroSamples, ManagerPolicy, PpoConfig};
    let cfg = PpoConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = ManagerPolicy::new(2, 1, &cfg, &mut rng).unwrap();
    let state: Vec<f64> = (0..policy.net.spec.state_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let prior = vec![0.0; 2];
    let prob = |p: &ManagerPolicy| {
        let logits = p.logits(&state, cfg.obs_scale).unwrap();
        allocation_distribution(&logits, &prior, 0.0).unwrap().probs()[1]
    };
    let mut curve = Vec::with_capacity(updates);
    for _ in 0..updates {
        let logits = policy.logits(&state, cfg.obs_scale).unwrap();
        let dist = allocation_distribution(&logits, &prior, 0.0).unwrap();
        let mut s = MacroSamples::default();
        for _ in 0..64 {
            let a = dist.sample(&mut rng);
            let r = a as f64;
            s.states.push(state.clone());
            s.prior.push(prior.clone());
            s.alpha.push(0.0);
            s.actions.push(a);
            s.old_logp.push(dist.log_prob(a));
            s.advantages.push(r - 0.5);
            s.returns.push(r);
        }
        update_manager(&mut policy, &s, &cfg, &mut rng).unwrap();
        curve.push(prob(&policy));
        if curve[curve.len() - 1] >= target {
            break;
        }
    }
    curve
}

pub const TX_DBM: f64 = 5.0;

pub fn model(pitch: f64) -> TileModel {
    ChannelConfig::default().tile_model(pitch)
}

/// Square grid in the z = 0 plane facing +z.
pub fn flat_grid(n: usize, pitch: f64) -> Vec<Vec3> {
    tile_centers(&SegmentSpec {
        origin: Vec3::ZERO,
        axis_u: Vec3::new(1.0, 0.0, 0.0),
        axis_v: Vec3::new(0.0, 1.0, 0.0),
        rows: n,
        cols: n,
        pitch,
    })
}

/// AP and user mirrored about the grid normal at distance `d`: the linear
/// path-length terms cancel, so all tile paths are equal to well under a
/// wavelength.
pub fn mirrored_pair(d: f64, beta: f64) -> (Vec3, Vec3) {
    (Vec3::new(-d * beta.sin(), 0.0, d * beta.cos()), Vec3::new(d * beta.sin(), 0.0, d * beta.cos()))
}

pub fn focused_coeffs(tiles: &[Vec3], ap: Vec3, user: Vec3, m: &TileModel) -> Vec<Complex64> {
    tiles.iter().map(|&t| m.coefficient(ap, t, tile_normal(t, ap, user).unwrap(), user).unwrap()).collect()
}

pub fn power(field: Complex64) -> f64 {
    received_power(field, TX_DBM).watts
}

/// Least-squares slope of log P against log N.
pub fn loglog_slope(ns: &[f64], ps: &[f64]) -> f64 {
    let xs: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = ps.iter().map(|p| p.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Log-log slopes of focused and random-phase power against tile count
/// (N = 4, 16, 64) for a mirrored AP/user pair 20 m from the grid.
pub fn coherent_slopes(draws: usize, seed: u64) -> (f64, f64) {
    let pitch = 0.025;
    let m = model(pitch);
    let (ap, user) = mirrored_pair(20.0, 0.4);
    let ns = [4.0, 16.0, 64.0];
    let mut focused = Vec::new();
    let mut random = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for side in [2, 4, 8] {
        let h = focused_coeffs(&flat_grid(side, pitch), ap, user, &m);
        focused.push(power(h.iter().sum()));
        let mean: f64 = (0..draws)
            .map(|_| {
                power(h.iter().map(|c| c * Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU))).sum())
            })
            .sum::<f64>()
            / draws as f64;
        random.push(mean);
    }
    (loglog_slope(&ns, &focused), loglog_slope(&ns, &random))
}

/// Focusing gain of the canonical first segment: user at (1, 1, 1.5),
/// focal point on the user versus 3 m away along x.
pub const CANONICAL_FOCUS_GAIN_DB: f64 = 27.116_445_527_681_18;

pub fn canonical_focus_gain() -> f64 {
    let scene = SceneConfig::canonical().build().unwrap();
    let user = Vec3::new(1.0, 1.0, 1.5);
    let rssi = |focal: Vec3| {
        let normals = scene.orient(0, focal);
        scene.received(user, &[(0, &normals)]).unwrap().rssi_dbm
    };
    rssi(user) - rssi(user + Vec3::new(-3.0, 0.0, 0.0))
}
