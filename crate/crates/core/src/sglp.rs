//! Spherical Gaussian latent policy: perturb a unit mean direction with
//! isotropic noise, project back to the sphere, and score samples with the
//! ambient Gaussian exponent.

use diffcore::functional::{dot, norm};
use diffcore::{Graph, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exponent clamp for importance ratios.
pub const RATIO_EXP_CLAMP: f64 = 50.0;
const SAMPLE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SglpError {
    #[error("perturbed mean collapsed to norm {0:e}")]
    DegenerateNorm(f64),
    #[error("group advantages need at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid sglp config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SglpConfig {
    pub sigma: f64,
    pub clip_eps: f64,
}

impl Default for SglpConfig {
    fn default() -> Self {
        Self { sigma: 0.1, clip_eps: 0.2 }
    }
}

impl SglpConfig {
    pub fn validate(&self) -> Result<(), SglpError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(SglpError::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(SglpError::Config(format!("clip_eps must be in (0, 1), got {}", self.clip_eps)));
        }
        Ok(())
    }
}

/// `(mu + eps) / |mu + eps|` for a given noise vector.
pub fn project_noise(mu: &[f64], eps: &[f64]) -> Result<Vec<f64>, SglpError> {
    if mu.len() != eps.len() {
        return Err(SglpError::ShapeMismatch(format!("mu {} vs noise {}", mu.len(), eps.len())));
    }
    let v: Vec<f64> = mu.iter().zip(eps).map(|(m, e)| m + e).collect();
    let n = norm(&v);
    if !(n > SAMPLE_FLOOR) {
        return Err(SglpError::DegenerateNorm(n));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// Draws one spherical sample around `mu`. A degenerate draw is retried once.
pub fn sample<R: Rng + ?Sized>(mu: &[f64], sigma: f64, rng: &mut R) -> Result<Vec<f64>, SglpError> {
    let draw = |rng: &mut R| -> Vec<f64> { (0..mu.len()).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect() };
    match project_noise(mu, &draw(rng)) {
        Err(SglpError::DegenerateNorm(_)) => project_noise(mu, &draw(rng)),
        r => r,
    }
}

/// `-|z - mu|^2 / (2 sigma^2)`.
pub fn log_density_unnorm(z: &[f64], mu: &[f64], sigma: f64) -> f64 {
    -sq_dist(z, mu) / (2.0 * sigma * sigma)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Dot-product form of the density, equal to [`log_density_unnorm`] on the sphere.
pub fn log_density_dot(z: &[f64], mu: &[f64], sigma: f64) -> f64 {
    (dot(z, mu) - 1.0) / (sigma * sigma)
}

pub fn importance_ratio(z: &[f64], mu_new: &[f64], mu_old: &[f64], sigma: f64) -> f64 {
    let e = (sq_dist(z, mu_old) - sq_dist(z, mu_new)) / (2.0 * sigma * sigma);
    e.clamp(-RATIO_EXP_CLAMP, RATIO_EXP_CLAMP).exp()
}

/// Centered rewards, no scale normalization.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, SglpError> {
    if rewards.len() < 2 {
        return Err(SglpError::GroupTooSmall(rewards.len()));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

pub fn clipped_latent_objective(ratios: &[f64], advantages: &[f64], clip_eps: f64) -> Result<f64, SglpError> {
    if ratios.len() != advantages.len() || ratios.is_empty() {
        return Err(SglpError::ShapeMismatch(format!(
            "{} ratios vs {} advantages",
            ratios.len(),
            advantages.len()
        )));
    }
    let total: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&p, &a)| (p * a).min(p.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a))
        .sum();
    Ok(total / ratios.len() as f64)
}

/// Per-row ratios as a differentiable r x 1 node. `mu_new` is r x d;
/// `z` and `mu_old` are flattened r x d constants.
pub fn ratio_graph(g: &mut Graph, z: &[f64], mu_new: Var, mu_old: &[f64], sigma: f64) -> Result<Var, SglpError> {
    let (r, d) = g.dims(mu_new);
    if z.len() != r * d || mu_old.len() != r * d {
        return Err(SglpError::ShapeMismatch(format!("ratio inputs for {r}x{d} means")));
    }
    let old: Vec<f64> = z.chunks(d).zip(mu_old.chunks(d)).map(|(a, b)| sq_dist(a, b)).collect();
    let zc = g.input(r, d, z.to_vec());
    let diff = g.sub(zc, mu_new);
    let new_sq = g.sum_squares_rows(diff);
    let old_sq = g.input(r, 1, old);
    let delta = g.sub(old_sq, new_sq);
    let e = g.scale(delta, 1.0 / (2.0 * sigma * sigma));
    Ok(g.exp_clamped(e, -RATIO_EXP_CLAMP, RATIO_EXP_CLAMP))
}

/// Sum (not mean) of clipped surrogate terms; callers divide by the total entry count.
pub fn clipped_sum_graph(g: &mut Graph, ratios: Var, advantages: Vec<f64>, clip_eps: f64) -> Var {
    let s = g.clipped_surrogate(ratios, advantages, clip_eps);
    g.sum(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn zero_noise_returns_mean() {
        let mu = [0.6, 0.8];
        assert_eq!(project_noise(&mu, &[0.0, 0.0]).unwrap(), vec![0.6, 0.8]);
    }

    #[test]
    fn forty_five_degree_example() {
        let z = project_noise(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((z[0] - 0.70710678).abs() < 1e-6 && (z[1] - 0.70710678).abs() < 1e-6);
    }

    #[test]
    fn exact_cancellation_is_degenerate() {
        assert!(matches!(project_noise(&[1.0, 0.0], &[-1.0, 0.0]), Err(SglpError::DegenerateNorm(_))));
    }

    #[test]
    fn samples_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let mu = rand_unit(&mut rng, 16);
            let z = sample(&mu, 0.1, &mut rng).unwrap();
            assert!((norm(&z) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn density_examples() {
        assert_eq!(log_density_unnorm(&[0.3, 0.4], &[0.3, 0.4], 0.1), 0.0);
        assert!((log_density_unnorm(&[0.0, 1.0], &[1.0, 0.0], 1.0) + 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let z = rand_unit(&mut rng, 8);
            let mu = rand_unit(&mut rng, 8);
            let s = rng.gen_range(0.05..2.0);
            assert!((log_density_unnorm(&z, &mu, s) - log_density_dot(&z, &mu, s)).abs() < 1e-9);
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(importance_ratio(&[0.6, 0.8], &[1.0, 0.0], &[1.0, 0.0], 0.1), 1.0);
        let r = importance_ratio(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 1.0);
        assert!((r - std::f64::consts::E).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let z = rand_unit(&mut rng, 8);
            let a = rand_unit(&mut rng, 8);
            let b = rand_unit(&mut rng, 8);
            let want = (log_density_unnorm(&z, &a, 0.5) - log_density_unnorm(&z, &b, 0.5)).exp();
            assert!((importance_ratio(&z, &a, &b, 0.5) - want).abs() < 1e-9 * want.max(1.0));
        }
    }

    #[test]
    fn ratio_exponent_is_clamped() {
        let r = importance_ratio(&[1.0, 0.0], &[1.0, 0.0], &[-1.0, 0.0], 1e-3);
        assert_eq!(r, RATIO_EXP_CLAMP.exp());
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[1.0, 0.0, 0.0, 1.0]).unwrap(), vec![0.5, -0.5, -0.5, 0.5]);
        assert_eq!(group_advantages(&[0.3; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(group_advantages(&[1.0]), Err(SglpError::GroupTooSmall(1)));
        let a = group_advantages(&[0.1, 1.7, -3.2, 0.05, 9.0]).unwrap();
        assert!(a.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn objective_examples() {
        assert!((clipped_latent_objective(&[1.5], &[1.0], 0.2).unwrap() - 1.2).abs() < 1e-12);
        assert!((clipped_latent_objective(&[0.5], &[-1.0], 0.2).unwrap() + 0.8).abs() < 1e-12);
        assert_eq!(clipped_latent_objective(&[1.0], &[-0.37], 0.2).unwrap(), -0.37);
        assert!(clipped_latent_objective(&[1.0, 1.0], &[1.0], 0.2).is_err());
    }

    #[test]
    fn objective_at_equal_policies_is_mean_advantage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let adv = [0.75, -0.25, -0.25, -0.25];
        let ratios: Vec<f64> = (0..4)
            .map(|_| {
                let mu = rand_unit(&mut rng, 8);
                let z = sample(&mu, 0.1, &mut rng).unwrap();
                importance_ratio(&z, &mu, &mu, 0.1)
            })
            .collect();
        let want = adv.iter().sum::<f64>() / 4.0;
        assert_eq!(clipped_latent_objective(&ratios, &adv, 0.2).unwrap(), want);
    }

    #[test]
    fn graph_ratio_matches_scalar_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (r, d) = (3, 6);
        let z: Vec<f64> = (0..r).flat_map(|_| rand_unit(&mut rng, d)).collect();
        let new: Vec<f64> = (0..r).flat_map(|_| rand_unit(&mut rng, d)).collect();
        let old: Vec<f64> = (0..r).flat_map(|_| rand_unit(&mut rng, d)).collect();
        let store = diffcore::ParamStore::new();
        let mut g = Graph::new(&store);
        let mu = g.input(r, d, new.clone());
        let ratios = ratio_graph(&mut g, &z, mu, &old, 0.7).unwrap();
        for i in 0..r {
            let s = i * d..(i + 1) * d;
            let want = importance_ratio(&z[s.clone()], &new[s.clone()], &old[s], 0.7);
            assert!((g.value(ratios)[i] - want).abs() < 1e-12);
        }
    }
}
