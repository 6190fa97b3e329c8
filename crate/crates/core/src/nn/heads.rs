use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Categorical distribution over logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    log_probs: Vec<f64>,
}

impl Categorical {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::ShapeMismatch("categorical needs at least one logit".into()));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("logits {logits:?}")));
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        Ok(Self { log_probs: logits.iter().map(|l| l - lse).collect() })
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob(&self, a: usize) -> f64 {
        self.log_probs[a]
    }

    /// Inverse-CDF sample; consumes exactly one uniform draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, l) in self.log_probs.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return i;
            }
        }
        self.log_probs.len() - 1
    }

    pub fn mode(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.log_probs.iter().enumerate() {
            if l > self.log_probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        -self.log_probs.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l }).sum::<f64>()
    }

    /// d log p(a) / d logits.
    pub fn grad_log_prob(&self, a: usize) -> Vec<f64> {
        self.log_probs
            .iter()
            .enumerate()
            .map(|(i, l)| if i == a { 1.0 } else { 0.0 } - l.exp())
            .collect()
    }

    /// d entropy / d logits.
    pub fn grad_entropy(&self) -> Vec<f64> {
        let h = self.entropy();
        self.log_probs.iter().map(|&l| -l.exp() * (l + h)).collect()
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian with a state-independent log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian<'a> {
    pub mean: &'a [f64],
    pub log_std: &'a [f64],
}

impl<'a> DiagGaussian<'a> {
    pub fn new(mean: &'a [f64], log_std: &'a [f64]) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::ShapeMismatch(format!("mean {} vs log_std {}", mean.len(), log_std.len())));
        }
        if mean.iter().chain(log_std).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gaussian mean {mean:?} log_std {log_std:?}")));
        }
        Ok(Self { mean, log_std })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(self.log_std)
            .map(|(m, s)| {
                let z: f64 = rng.sample(StandardNormal);
                m + s.exp() * z
            })
            .collect()
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(self.log_std)
            .zip(x)
            .map(|((m, s), x)| {
                let z = (x - m) / s.exp();
                -0.5 * z * z - s - HALF_LN_2PI
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|s| s + 0.5 + HALF_LN_2PI).sum()
    }

    /// (d log p / d mean, d log p / d log_std) at `x`.
    pub fn grad_log_prob(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut dm = Vec::with_capacity(x.len());
        let mut ds = Vec::with_capacity(x.len());
        for ((m, s), x) in self.mean.iter().zip(self.log_std).zip(x) {
            let var = (2.0 * s).exp();
            dm.push((x - m) / var);
            ds.push((x - m) * (x - m) / var - 1.0);
        }
        (dm, ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_pair() {
        let c = Categorical::from_logits(&[0.0, 0.0]).unwrap();
        assert!(c.probs().iter().all(|p| (p - 0.5).abs() < 1e-15));
        assert!((c.entropy() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn probabilities_normalize() {
        let c = Categorical::from_logits(&[3.0, -1.0, 700.0, 0.2]).unwrap();
        assert!((c.probs().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert_eq!(c.mode(), 2);
        assert!(Categorical::from_logits(&[f64::NAN]).is_err());
        assert!(Categorical::from_logits(&[]).is_err());
    }

    #[test]
    fn categorical_gradients_match_finite_differences() {
        let logits = [0.3, -1.2, 0.7, 2.0];
        let c = Categorical::from_logits(&logits).unwrap();
        let g = c.grad_log_prob(2);
        let ge = c.grad_entropy();
        let h = 1e-6;
        for i in 0..4 {
            let mut lp = logits;
            lp[i] += h;
            let mut lm = logits;
            lm[i] -= h;
            let (cp, cm) = (Categorical::from_logits(&lp).unwrap(), Categorical::from_logits(&lm).unwrap());
            assert!(((cp.log_prob(2) - cm.log_prob(2)) / (2.0 * h) - g[i]).abs() < 1e-8);
            assert!(((cp.entropy() - cm.entropy()) / (2.0 * h) - ge[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn gaussian_entropy_formula_and_limit() {
        let mean = [0.0; 3];
        let mut prev = f64::INFINITY;
        for s in [0.0, -2.0, -5.0, -20.0] {
            let ls = [s; 3];
            let g = DiagGaussian::new(&mean, &ls).unwrap();
            let e = g.entropy();
            assert!((e - 3.0 * (s + 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln())).abs() < 1e-12);
            assert!(e < prev);
            prev = e;
        }
    }

    #[test]
    fn gaussian_log_prob_and_gradients() {
        let mean = [0.5, -1.0];
        let ls = [0.3f64.ln(), 0.0];
        let g = DiagGaussian::new(&mean, &ls).unwrap();
        let x = [0.7, -0.2];
        let expect = -0.5 * (0.2f64 / 0.3).powi(2) - 0.3f64.ln() - HALF_LN_2PI - 0.5 * 0.64 - HALF_LN_2PI;
        assert!((g.log_prob(&x) - expect).abs() < 1e-12);
        let (dm, ds) = g.grad_log_prob(&x);
        let h = 1e-6;
        for i in 0..2 {
            let mut mp = mean;
            mp[i] += h;
            let mut mm = mean;
            mm[i] -= h;
            let fd = (DiagGaussian::new(&mp, &ls).unwrap().log_prob(&x) - DiagGaussian::new(&mm, &ls).unwrap().log_prob(&x)) / (2.0 * h);
            assert!((fd - dm[i]).abs() < 1e-7);
            let mut sp = ls;
            sp[i] += h;
            let mut sm = ls;
            sm[i] -= h;
            let fd = (DiagGaussian::new(&mean, &sp).unwrap().log_prob(&x) - DiagGaussian::new(&mean, &sm).unwrap().log_prob(&x)) / (2.0 * h);
            assert!((fd - ds[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn gaussian_sample_mean_statistics() {
        let mean = [0.4, -0.2, 1.0];
        let ls = [0.3f64.ln(); 3];
        let g = DiagGaussian::new(&mean, &ls).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let s = g.sample(&mut rng);
            for d in 0..3 {
                acc[d] += s[d];
            }
        }
        for d in 0..3 {
            let m = acc[d] / n as f64;
            assert!((m - mean[d]).abs() < 3.0 * 0.3 / (n as f64).sqrt(), "axis {d}: {m}");
        }
    }
}
