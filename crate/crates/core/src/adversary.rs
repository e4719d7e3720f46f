//! Model-based byzantine attacks. Each construction rewrites the deltas of
//! malicious clients after the honest updates of the round are known.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::error::{FedError, Result};
use crate::numkit::vecops;

/// Direction `∇^p` along which Min-Max / Min-Sum push the benign mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// `-μ / ‖μ‖`
    #[default]
    NegUnitMean,
    /// `-sign(μ)`
    NegSign,
    /// `-σ / ‖σ‖`
    UnitStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaSearch {
    #[serde(default)]
    pub perturbation: Perturbation,
    #[serde(default = "GammaSearch::default_initial")]
    pub initial: f64,
    #[serde(default = "GammaSearch::default_tolerance")]
    pub tolerance: f64,
}

impl GammaSearch {
    fn default_initial() -> f64 {
        1.0
    }
    fn default_tolerance() -> f64 {
        1e-5
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || !(self.initial > 0.0) {
            return Err(FedError::config(
                "gamma search needs tolerance > 0 and initial > 0",
            ));
        }
        Ok(())
    }
}

impl Default for GammaSearch {
    fn default() -> Self {
        Self {
            perturbation: Perturbation::default(),
            initial: Self::default_initial(),
            tolerance: Self::default_tolerance(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelAttack {
    RandomNoise {
        scale: f64,
    },
    /// `z = None` selects the quantile default from client/attacker counts.
    Lie {
        z: Option<f64>,
    },
    MinMax(GammaSearch),
    MinSum(GammaSearch),
}

impl ModelAttack {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelAttack::RandomNoise { scale } if !(*scale >= 0.0) => {
                Err(FedError::config("noise scale must be >= 0"))
            }
            ModelAttack::MinMax(s) | ModelAttack::MinSum(s) => s.validate(),
            _ => Ok(()),
        }
    }
}

/// Malicious delta plus the scaling coefficient found by the search.
#[derive(Debug, Clone, PartialEq)]
pub struct Crafted {
    pub delta: Vec<f64>,
    pub gamma: f64,
}

pub fn attack_random_noise<R: Rng + ?Sized>(len: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    if scale == 0.0 {
        return vec![0.0; len];
    }
    let normal = Normal::new(0.0, scale).expect("scale validated");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// Coordinate-wise mean and population standard deviation.
pub fn mean_std(benign: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let mu = vecops::mean(benign);
    let n = benign.len() as f64;
    let mut var = vec![0.0; mu.len()];
    for b in benign {
        for ((v, x), m) in var.iter_mut().zip(b.iter()).zip(&mu) {
            *v += (x - m) * (x - m);
        }
    }
    let sigma = var.into_iter().map(|v| (v / n).sqrt()).collect();
    (mu, sigma)
}

fn check_benign(benign: &[&[f64]]) -> Result<usize> {
    if benign.len() < 2 {
        return Err(FedError::Undefined(format!(
            "attack needs >= 2 benign updates, got {}",
            benign.len()
        )));
    }
    let dim = benign[0].len();
    if let Some(b) = benign.iter().find(|b| b.len() != dim) {
        return Err(FedError::Dimension {
            expected: dim,
            actual: b.len(),
            context: "benign update",
        });
    }
    Ok(dim)
}

/// Quantile construction for the LIE coefficient: with `n` clients and `m`
/// attackers, `s = ⌊n/2 + 1⌋ - m` supporters are needed and
/// `z = Φ⁻¹((n - s) / n)`.
pub fn default_lie_z(clients: usize, attackers: usize) -> f64 {
    let n = clients as f64;
    let s = (clients / 2 + 1) as f64 - attackers as f64;
    let p = ((n - s) / n).clamp(1e-6, 1.0 - 1e-6);
    StdNormal::standard().inverse_cdf(p)
}

pub fn attack_lie(benign: &[&[f64]], z: f64) -> Result<Vec<f64>> {
    check_benign(benign)?;
    let (mu, sigma) = mean_std(benign);
    Ok(mu.iter().zip(&sigma).map(|(m, s)| m + z * s).collect())
}

fn perturbation(kind: Perturbation, mu: &[f64], sigma: &[f64]) -> Vec<f64> {
    match kind {
        Perturbation::NegUnitMean => {
            let n = vecops::norm(mu);
            if n == 0.0 {
                vec![0.0; mu.len()]
            } else {
                mu.iter().map(|m| -m / n).collect()
            }
        }
        Perturbation::NegSign => mu
            .iter()
            .map(|m| if *m > 0.0 { -1.0 } else if *m < 0.0 { 1.0 } else { 0.0 })
            .collect(),
        Perturbation::UnitStd => {
            let n = vecops::norm(sigma);
            if n == 0.0 {
                vec![0.0; sigma.len()]
            } else {
                sigma.iter().map(|s| -s / n).collect()
            }
        }
    }
}

/// Largest feasible `γ` for `μ + γ p`, assuming the feasible set is an
/// interval containing 0. Doubles an upper bracket, then bisects until the
/// bracket is narrower than the tolerance; returns the feasible end.
fn search_gamma(
    mu: &[f64],
    p: &[f64],
    search: &GammaSearch,
    feasible: impl Fn(&[f64]) -> bool,
) -> Crafted {
    let at = |g: f64| -> Vec<f64> { mu.iter().zip(p).map(|(m, d)| m + g * d).collect() };
    if p.iter().all(|d| *d == 0.0) {
        return Crafted {
            delta: mu.to_vec(),
            gamma: 0.0,
        };
    }
    let mut lo = 0.0;
    let mut hi = search.initial;
    let mut doublings = 0;
    while feasible(&at(hi)) {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 {
            break;
        }
    }
    while hi - lo > search.tolerance {
        let mid = 0.5 * (lo + hi);
        if feasible(&at(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Crafted {
        delta: at(lo),
        gamma: lo,
    }
}

/// `max_i ‖∇ - ∇_i‖ <= max_{i,j} ‖∇_i - ∇_j‖`.
pub fn min_max_bound(benign: &[&[f64]]) -> f64 {
    let mut bound: f64 = 0.0;
    for (i, a) in benign.iter().enumerate() {
        for b in &benign[i + 1..] {
            bound = bound.max(vecops::dist(a, b));
        }
    }
    bound
}

/// `max_i Σ_j ‖∇_i - ∇_j‖²`.
pub fn min_sum_bound(benign: &[&[f64]]) -> f64 {
    benign
        .iter()
        .map(|a| benign.iter().map(|b| vecops::dist_sq(a, b)).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn attack_min_max(benign: &[&[f64]], search: &GammaSearch) -> Result<Crafted> {
    check_benign(benign)?;
    search.validate()?;
    let (mu, sigma) = mean_std(benign);
    let bound = min_max_bound(benign);
    if bound == 0.0 {
        return Ok(Crafted {
            delta: mu,
            gamma: 0.0,
        });
    }
    let p = perturbation(search.perturbation, &mu, &sigma);
    Ok(search_gamma(&mu, &p, search, |cand| {
        benign.iter().all(|b| vecops::dist(cand, b) <= bound)
    }))
}

pub fn attack_min_sum(benign: &[&[f64]], search: &GammaSearch) -> Result<Crafted> {
    check_benign(benign)?;
    search.validate()?;
    let (mu, sigma) = mean_std(benign);
    let bound = min_sum_bound(benign);
    if bound == 0.0 {
        return Ok(Crafted {
            delta: mu,
            gamma: 0.0,
        });
    }
    let p = perturbation(search.perturbation, &mu, &sigma);
    Ok(search_gamma(&mu, &p, search, |cand| {
        benign.iter().map(|b| vecops::dist_sq(cand, b)).sum::<f64>() <= bound
    }))
}

/// Round-level hook: replaces the deltas of every malicious client.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPoisoner {
    pub attack: ModelAttack,
}

impl ModelPoisoner {
    pub fn new(attack: ModelAttack) -> Result<Self> {
        attack.validate()?;
        Ok(Self { attack })
    }

    /// Rewrites `deltas[i]` for every `i` with `malicious[i]`; returns the
    /// search coefficient when the attack has one.
    ///
    /// Omniscient attacks read the benign deltas of the same round and all
    /// malicious clients submit the same crafted vector.
    pub fn rewrite<R: Rng + ?Sized>(
        &self,
        deltas: &mut [Vec<f64>],
        malicious: &[bool],
        rng: &mut R,
    ) -> Result<Option<f64>> {
        let attackers = malicious.iter().filter(|m| **m).count();
        if attackers == 0 {
            return Ok(None);
        }
        let dim = deltas.first().map_or(0, Vec::len);
        if let ModelAttack::RandomNoise { scale } = self.attack {
            for (d, _) in deltas.iter_mut().zip(malicious).filter(|(_, m)| **m) {
                *d = attack_random_noise(dim, scale, rng);
            }
            return Ok(None);
        }
        let benign: Vec<&[f64]> = deltas
            .iter()
            .zip(malicious)
            .filter(|(_, m)| !**m)
            .map(|(d, _)| d.as_slice())
            .collect();
        let (crafted, gamma) = match &self.attack {
            ModelAttack::Lie { z } => {
                let z = z.unwrap_or_else(|| default_lie_z(deltas.len(), attackers));
                (attack_lie(&benign, z)?, None)
            }
            ModelAttack::MinMax(s) => {
                let c = attack_min_max(&benign, s)?;
                (c.delta, Some(c.gamma))
            }
            ModelAttack::MinSum(s) => {
                let c = attack_min_sum(&benign, s)?;
                (c.delta, Some(c.gamma))
            }
            ModelAttack::RandomNoise { .. } => unreachable!(),
        };
        for (d, _) in deltas.iter_mut().zip(malicious).filter(|(_, m)| **m) {
            d.clone_from(&crafted);
        }
        Ok(gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_scale_noise_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(attack_random_noise(4, 0.0, &mut rng), vec![0.0; 4]);
    }

    #[test]
    fn noise_is_stream_deterministic() {
        let a = attack_random_noise(8, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let b = attack_random_noise(8, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn noise_ignores_input() {
        // correlation between a fixed honest delta and the noise replacing it
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let input: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let poisoner = ModelPoisoner::new(ModelAttack::RandomNoise { scale: 1.0 }).unwrap();
        let mut corr_sum = 0.0;
        for _ in 0..100 {
            let mut deltas = vec![input.clone(), input.clone(), input.clone()];
            poisoner
                .rewrite(&mut deltas, &[true, false, false], &mut rng)
                .unwrap();
            corr_sum += vecops::cosine(&deltas[0], &input);
        }
        assert!((corr_sum / 100.0).abs() < 0.05);
    }

    #[test]
    fn lie_examples() {
        let a = [1.0];
        let b = [3.0];
        let benign: Vec<&[f64]> = vec![&a, &b];
        assert_eq!(attack_lie(&benign, 0.0).unwrap(), vec![2.0]);
        assert_eq!(attack_lie(&benign, 1.0).unwrap(), vec![3.0]);
        let same: Vec<&[f64]> = vec![&[4.0, -1.0], &[4.0, -1.0], &[4.0, -1.0]];
        assert_eq!(attack_lie(&same, 2.5).unwrap(), vec![4.0, -1.0]);
        let single: Vec<&[f64]> = vec![&a];
        assert!(attack_lie(&single, 1.0).is_err());
    }

    #[test]
    fn lie_default_z() {
        // n=10, m=4: s = 2, p = 0.8
        assert!((default_lie_z(10, 4) - 0.841_621_233_572_914_3).abs() < 1e-9);
    }

    #[test]
    fn identical_benign_returns_mean() {
        let same: Vec<&[f64]> = vec![&[1.0, 2.0], &[1.0, 2.0]];
        let s = GammaSearch::default();
        assert_eq!(attack_min_max(&same, &s).unwrap().gamma, 0.0);
        assert_eq!(attack_min_sum(&same, &s).unwrap().delta, vec![1.0, 2.0]);
    }

    #[test]
    fn one_dimensional_closed_forms() {
        let benign: Vec<&[f64]> = vec![&[0.0], &[2.0]];
        let s = GammaSearch::default();
        let mm = attack_min_max(&benign, &s).unwrap();
        let ms = attack_min_sum(&benign, &s).unwrap();
        // both constraints give γ* = 1
        for g in [mm.gamma, ms.gamma] {
            assert!(g <= 1.0 && g > 1.0 - s.tolerance, "{g}");
        }
        // grid oracle for min-max
        let best = (0..=300_000)
            .map(|k| k as f64 * 1e-5)
            .filter(|g| (1.0 - g).abs().max((1.0 - g - 2.0).abs()) <= 2.0)
            .fold(0.0, f64::max);
        assert!((mm.gamma - best).abs() <= 2.0 * s.tolerance);
    }

    #[test]
    fn perturbation_variants() {
        let mu = [3.0, -4.0];
        let sigma = [0.0, 2.0];
        assert_eq!(perturbation(Perturbation::NegUnitMean, &mu, &sigma), vec![-0.6, 0.8]);
        assert_eq!(perturbation(Perturbation::NegSign, &mu, &sigma), vec![-1.0, 1.0]);
        assert_eq!(perturbation(Perturbation::UnitStd, &mu, &sigma), vec![-0.0, -1.0]);
    }

    #[test]
    fn rewrite_copies_crafted_vector() {
        let mut deltas = vec![vec![0.0], vec![2.0], vec![5.0], vec![5.0]];
        let poisoner = ModelPoisoner::new(ModelAttack::MinMax(GammaSearch::default())).unwrap();
        let gamma = poisoner
            .rewrite(
                &mut deltas,
                &[false, false, true, true],
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
        assert!(gamma.unwrap() > 0.99);
        assert_eq!(deltas[2], deltas[3]);
        assert_eq!(deltas[0], vec![0.0]);
    }
}
