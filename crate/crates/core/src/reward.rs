//! Outcome, focus and total rewards.

use serde::{Deserialize, Serialize};

use crate::format::{parse, TokenId, Vocab};
use crate::synth::{exact_match, TaskInstance};

/// Probability floor applied to the model's attention before the KL.
pub const SMOOTH_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub beta: f64,
    pub lambda: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { beta: 0.1, lambda: 1.0 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.beta >= 0.0) || !(self.lambda > 0.0) {
            return Err(format!("reward needs beta >= 0 and lambda > 0, got {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub outcome: f64,
    pub focus: f64,
    pub total: f64,
}

/// 1 when the sequence parses, was not cut off, and its answer matches.
pub fn outcome_reward(tokens: &[TokenId], truncated: bool, task: &TaskInstance, vocab: &Vocab) -> f64 {
    if truncated {
        return 0.0;
    }
    match parse(tokens, vocab) {
        Ok(p) => exact_match(&p.trajectory.answer_text(), &task.answer) as f64,
        Err(_) => 0.0,
    }
}

/// Floors every entry at [`SMOOTH_FLOOR`] and renormalizes.
pub fn smooth(q: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = q.iter().map(|&x| x.max(SMOOTH_FLOOR)).collect();
    let s: f64 = floored.iter().sum();
    floored.into_iter().map(|x| x / s).collect()
}

/// `sum p ln(p / q)` with `q` smoothed; zero-probability terms of `p` vanish.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let q = smooth(q);
    p.iter().zip(&q).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum()
}

/// Mean KL over aligned steps. With no aligned step the first oracle map is
/// compared against uniform attention.
pub fn mean_step_kl(latent: &[Vec<f64>], oracle: &[Vec<f64>]) -> f64 {
    let k = latent.len().min(oracle.len());
    if k == 0 {
        return match oracle.first() {
            Some(o) => kl(o, &vec![1.0 / o.len() as f64; o.len()]),
            None => 0.0,
        };
    }
    (0..k).map(|i| kl(&oracle[i], &latent[i])).sum::<f64>() / k as f64
}

pub fn focus_reward(latent: &[Vec<f64>], oracle: &[Vec<f64>], lambda: f64) -> f64 {
    (-lambda * mean_step_kl(latent, oracle)).exp()
}

pub fn total_reward(outcome: f64, focus: f64, beta: f64) -> f64 {
    outcome + if outcome > 0.0 { beta * focus } else { 0.0 }
}

pub fn breakdown(outcome: f64, focus: f64, cfg: &RewardConfig) -> RewardBreakdown {
    RewardBreakdown { outcome, focus, total: total_reward(outcome, focus, cfg.beta) }
}
