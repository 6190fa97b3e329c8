//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 5 10`.

mod common;

use std::collections::HashMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    bandit_curve, canonical_focus_gain, coherent_slopes, discounted_advantage, manager_gradcheck, mlp_gradcheck,
    td_residuals, GradCheck, CANONICAL_FOCUS_GAIN_DB,
};
use hmarl::geometry::{tile_normal, Vec3};
use hmarl::harness::{dimensionality_report, evaluate, run_method, Checkpoint, Method, MethodRun, RunConfig};
use hmarl::marl::{
    allocation_distribution, compute_gae, critic_dim, encode_allocation, prior_scores, select_allocation,
    PpoConfig, PriorSchedule,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const SEEDS: [u64; 3] = [0, 1, 2];
const EVAL_SEEDS: [u64; 3] = [100, 101, 102];

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("took {:.1} s, limit {} s", took.as_secs_f64(), limit.as_secs()));
    }
    Ok(())
}

fn specular_law() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = || Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
    let (mut worst, mut n) = (0.0f64, 0);
    while n < 10_000 {
        let (t, s, f) = (p(), p(), p());
        let (a, b) = ((s - t) / (s - t).norm(), (f - t) / (f - t).norm());
        if (s - t).norm() < 1e-3 || (f - t).norm() < 1e-3 || (a + b).norm() < 1e-3 {
            continue;
        }
        let normal = tile_normal(t, s, f).map_err(|e| e.to_string())?;
        worst = worst.max((-a).reflect(normal).angle_to(b));
        n += 1;
    }
    within(Duration::from_secs(5), start)?;
    check(worst < 1e-9, format!("max aiming error {worst:.2e} rad over {n} instances"))
}

fn coherent_scaling() -> Outcome {
    let start = Instant::now();
    let (focused, random) = coherent_slopes(100, 2);
    within(Duration::from_secs(30), start)?;
    check(
        (focused - 2.0).abs() <= 0.1 && (random - 1.0).abs() <= 0.2,
        format!("focused slope {focused:.4}, random-phase slope {random:.4}"),
    )
}

fn focusing_advantage() -> Outcome {
    let start = Instant::now();
    let gain = canonical_focus_gain();
    within(Duration::from_secs(5), start)?;
    check(
        gain >= 15.0 && (gain - CANONICAL_FOCUS_GAIN_DB).abs() < 1e-9,
        format!("gain {gain:.4} dB (pinned {CANONICAL_FOCUS_GAIN_DB:.4})"),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let cfg = PpoConfig::default();
    let state_dim = 3 * 2 + 6 * 2;
    let nets: [(&str, Box<dyn Fn(u64) -> GradCheck>); 5] = [
        ("actor", Box::new(|s| mlp_gradcheck(9, &cfg.actor_hidden, 3, s))),
        ("critic", Box::new(|s| mlp_gradcheck(critic_dim(2, 2), &cfg.critic_hidden, 1, s))),
        ("manager", Box::new(|s| manager_gradcheck(2, 2, s))),
        ("manager critic", Box::new(|s| mlp_gradcheck(state_dim, &cfg.manager_critic_hidden, 1, s))),
        ("central", Box::new(|s| mlp_gradcheck(state_dim, &cfg.actor_hidden, 3 * 2 + 4, s))),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, run) in &nets {
        let mut worst = 0.0f64;
        let (mut checked, mut skipped) = (0, 0);
        for seed in 0..10 {
            let r = run(1000 + seed);
            ok &= r.passes(1e-4);
            worst = worst.max(r.worst);
            checked += r.checked;
            skipped += r.skipped;
        }
        parts.push(format!("{name} {worst:.1e} ({checked} entries, {skipped} kinks)"));
    }
    within(Duration::from_secs(60), start)?;
    check(ok, format!("worst relative error: {}", parts.join(", ")))
}

fn gae_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut exact) = (0.0f64, true);
    for _ in 0..100 {
        let n = rng.random_range(1..300);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.03)).collect();
        let boot = rng.random_range(-5.0..5.0);
        let gamma = rng.random_range(0.8..1.0);
        let (adv, _) = compute_gae(&r, &v, &d, boot, gamma, 1.0).map_err(|e| e.to_string())?;
        let want = discounted_advantage(&r, &v, &d, boot, gamma);
        worst = adv.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        let (adv0, _) = compute_gae(&r, &v, &d, boot, gamma, 0.0).map_err(|e| e.to_string())?;
        exact &= adv0 == td_residuals(&r, &v, &d, boot, gamma);
    }
    check(worst < 1e-10 && exact, format!("lambda=1 max error {worst:.2e}; lambda=0 exact: {exact}"))
}

/// One segment, one stationary user, focal agent only.
fn single_agent_config() -> RunConfig {
    let mut cfg = RunConfig { method: Method::Random, ..RunConfig::default() };
    cfg.scene.segments.truncate(1);
    cfg.env.n_users = 1;
    cfg.env.user_speed = 0.0;
    cfg.env.fixed_users = vec![Vec3::new(1.0, 1.0, 1.5)];
    cfg.ppo.total_episodes = 500;
    cfg
}

/// Best RSSI over focal points on a 0.1 m grid across the region at three heights.
fn grid_oracle(cfg: &RunConfig, user: Vec3) -> Result<f64, String> {
    let scene = cfg.scene.build().map_err(|e| e.to_string())?;
    let r = scene.region;
    let nx = ((r.x_max - r.x_min) / 0.1).round() as usize;
    let ny = ((r.y_max - r.y_min) / 0.1).round() as usize;
    let mut best = f64::NEG_INFINITY;
    for h in [0.5, 1.5, 2.5] {
        for ix in 0..=nx {
            for iy in 0..=ny {
                let f = Vec3::new(r.x_min + ix as f64 * 0.1, r.y_min + iy as f64 * 0.1, h);
                let normals = scene.orient(0, f);
                let rx = scene.received(user, &[(0, &normals)]).map_err(|e| e.to_string())?;
                best = best.max(rx.rssi_dbm);
            }
        }
    }
    Ok(best)
}

fn ppo_sanity() -> Outcome {
    let curve = bandit_curve(200, 0.99, 4);
    let hit = curve.iter().position(|&p| p >= 0.99);
    let bandit = format!(
        "bandit p>=0.99 after {} updates",
        hit.map_or("never".to_string(), |h| (h + 1).to_string())
    );

    let start = Instant::now();
    let cfg = single_agent_config();
    let run = run_method(&cfg, None).map_err(|e| e.to_string())?;
    let train_time = start.elapsed();
    let oracle = grid_oracle(&cfg, cfg.env.fixed_users[0])?;
    let mut achieved = 0.0;
    for &s in &EVAL_SEEDS {
        let rep = evaluate(&run.checkpoint, &cfg, 0.0, s).map_err(|e| e.to_string())?;
        let tail: Vec<f64> = rep.rssi_dbm[rep.rssi_dbm.len() / 2..].iter().map(|r| r[0].max(-90.0)).collect();
        achieved += tail.iter().sum::<f64>() / tail.len() as f64 / EVAL_SEEDS.len() as f64;
    }
    let ok = hit.is_some() && achieved >= oracle - 3.0 && train_time <= Duration::from_secs(600);
    check(
        ok,
        format!(
            "{bandit}; focal task {achieved:.2} dBm vs oracle {oracle:.2} dBm after 500 episodes ({:.0} s)",
            train_time.as_secs_f64()
        ),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean floored RSSI of a checkpoint over the evaluation seeds.
fn eval_mean(ck: &Checkpoint, cfg: &RunConfig, sigma: f64) -> Result<f64, String> {
    let mut v = Vec::new();
    for &s in &EVAL_SEEDS {
        v.push(evaluate(ck, cfg, sigma, s).map_err(|e| e.to_string())?.mean_dbm);
    }
    Ok(mean(&v))
}

fn desk(method: Method, seed: u64, sigma: f64) -> RunConfig {
    let mut cfg = RunConfig { method, seed, ..RunConfig::default() };
    cfg.env.noise_sigma = sigma;
    cfg
}

/// Trained runs shared between the ordering and noise experiments.
#[derive(Default)]
struct Runs(HashMap<(Method, u64, u64), MethodRun>);

impl Runs {
    fn get(&mut self, method: Method, seed: u64, sigma: f64) -> Result<&MethodRun, String> {
        let key = (method, seed, sigma.to_bits());
        if !self.0.contains_key(&key) {
            let run = run_method(&desk(method, seed, sigma), None).map_err(|e| format!("{method} seed {seed}: {e}"))?;
            if !run.checkpoint.policies.all_finite() {
                return Err(format!("{method} seed {seed}: non-finite parameters"));
            }
            self.0.insert(key, run);
        }
        Ok(&self.0[&key])
    }
}

fn hierarchy_ordering(runs: &mut Runs) -> Outcome {
    let start = Instant::now();
    let mut reward = HashMap::new();
    let mut rssi = HashMap::new();
    for method in Method::ALL {
        let (mut r, mut e) = (Vec::new(), Vec::new());
        for seed in SEEDS {
            let run = runs.get(method, seed, 0.0)?;
            r.push(run.final_mean_reward(100));
            let ck = run.checkpoint.clone();
            e.push(eval_mean(&ck, &desk(method, seed, 0.0), 0.0)?);
        }
        reward.insert(method, mean(&r));
        rssi.insert(method, mean(&e));
    }
    within(Duration::from_secs(3600), start)?;
    use Method::*;
    let gap = rssi[&Allocator] - rssi[&NoAllocator];
    let ok = reward[&Allocator] >= reward[&NoCompat]
        && reward[&NoCompat] >= reward[&Random]
        && reward[&Allocator] > reward[&NoAllocator]
        && gap >= 2.0;
    let rewards: Vec<String> = Method::ALL.iter().map(|m| format!("{m} {:.2}", reward[m])).collect();
    check(ok, format!("final-100 reward: {}; eval RSSI gap vs no_allocator {gap:.2} dB", rewards.join(", ")))
}

fn prior_behavior() -> Outcome {
    let compat = vec![vec![0.9, 0.2], vec![0.3, 0.8]];
    let zeros = vec![0.0; 4];
    let dist = allocation_distribution(&zeros, &prior_scores(&compat, 2), 5.0).map_err(|e| e.to_string())?;
    let want = encode_allocation(&[0, 1], 2);
    let mode_ok = dist.mode() == want;

    let schedule = PriorSchedule::default();
    let total = 800;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut identical = true;
    let mut checked = 0;
    for ep in 0..total {
        if (ep as f64) < schedule.cutoff_episode(total) {
            continue;
        }
        let mut a = ChaCha8Rng::seed_from_u64(ep as u64);
        let mut b = a.clone();
        for _ in 0..20 {
            let x = select_allocation(&logits, &compat, 2, schedule.alpha(ep, total), &mut a).map_err(|e| e.to_string())?;
            let y = select_allocation(&logits, &compat, 2, 0.0, &mut b).map_err(|e| e.to_string())?;
            identical &= x.0 == y.0 && x.1.to_bits() == y.1.to_bits();
        }
        identical &= a.random::<u64>() == b.random::<u64>();
        checked += 1;
    }
    check(
        mode_ok && identical && checked > 0,
        format!("mode at alpha=5 is {} (argmax {want}); {checked} post-cutoff episodes bit-identical: {identical}", dist.mode()),
    )
}

fn noise_monotonicity(runs: &mut Runs) -> Outcome {
    let sigmas = [0.0, 0.5, 2.0];
    let mut means = Vec::new();
    for &sigma in &sigmas {
        let mut v = Vec::new();
        for seed in SEEDS {
            let ck = runs.get(Method::Allocator, seed, sigma)?.checkpoint.clone();
            v.push(eval_mean(&ck, &desk(Method::Allocator, seed, sigma), sigma)?);
        }
        means.push(mean(&v));
    }
    let ok = means.windows(2).all(|w| w[0] - w[1] >= 1.0);
    let parts: Vec<String> = sigmas.iter().zip(&means).map(|(s, m)| format!("sigma {s}: {m:.2} dBm")).collect();
    check(ok, parts.join(", "))
}

fn dimensionality() -> Outcome {
    let got = dimensionality_report(4, 2, 10, 10).map_err(|e| e.to_string())?;
    check(got == (216, 22), format!("(K=4, L=2, 10x10) -> {got:?}"))
}

fn one_run(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let mut cfg = RunConfig { n_envs: 1, ..RunConfig::default() };
    cfg.ppo.total_episodes = 20;
    let run = run_method(&cfg, Some(dir)).map_err(|e| e.to_string())?;
    let report = evaluate(&run.checkpoint, &cfg, 0.0, 9).map_err(|e| e.to_string())?;
    report.write_csv(&dir.join("eval_rssi.csv")).map_err(|e| e.to_string())?;
    let read = |f: &str| std::fs::read(dir.join(f)).map_err(|e| e.to_string());
    Ok((read("training_curve.csv")?, read("eval_rssi.csv")?))
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ca, ea) = one_run(a.path())?;
    let (cb, eb) = one_run(b.path())?;
    check(
        ca == cb && ea == eb,
        format!("training curve identical: {}, eval csv identical: {} ({} + {} bytes)", ca == cb, ea == eb, ca.len(), ea.len()),
    )
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut runs = Runs::default();
    let names = [
        "specular law",
        "coherent gain scaling",
        "focusing advantage",
        "gradient checks",
        "GAE oracle",
        "PPO sanity",
        "hierarchy ordering",
        "prior behavior",
        "noise monotonicity",
        "dimensionality",
        "determinism",
    ];
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !run(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = match n {
            1 => specular_law(),
            2 => coherent_scaling(),
            3 => focusing_advantage(),
            4 => gradient_checks(),
            5 => gae_oracle(),
            6 => ppo_sanity(),
            7 => hierarchy_ordering(&mut runs),
            8 => prior_behavior(),
            9 => noise_monotonicity(&mut runs),
            10 => dimensionality(),
            _ => determinism(),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
