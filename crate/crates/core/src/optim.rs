//! AdamW with decoupled weight decay, per-group learning rates and a
//! warmup-then-cosine schedule.

use diffcore::{Gradients, ParamId, ParamStore};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, warmup_frac: 0.1, max_grad_norm: 1.0 }
    }
}

/// Learning-rate multiplier: linear warmup then cosine decay to zero.
pub fn schedule(step: usize, total: usize, warmup_frac: f64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let warmup = (warmup_frac * total as f64).round() as usize;
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub ids: Vec<ParamId>,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub groups: Vec<ParamGroup>,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    t: u64,
}

/// Whether a parameter receives weight decay: matrices yes, gains and biases no.
fn decays(store: &ParamStore, id: ParamId) -> bool {
    store.value(id).shape().first().is_some_and(|&r| r > 1)
}

impl AdamW {
    pub fn new(cfg: OptimConfig, groups: Vec<ParamGroup>) -> Self {
        Self { cfg, groups, moments: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Global L2 norm of the gradients of every grouped parameter.
    pub fn grad_norm(&self, grads: &Gradients) -> f64 {
        let mut s = 0.0;
        for g in &self.groups {
            for &id in &g.ids {
                if let Some(gr) = grads.param(id) {
                    s += gr.iter().map(|x| x * x).sum::<f64>();
                }
            }
        }
        s.sqrt()
    }

    /// One update with `lr_factor` times each group's rate. Returns the
    /// pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr_factor: f64) -> f64 {
        let gnorm = self.grad_norm(grads);
        let clip = if self.cfg.max_grad_norm > 0.0 && gnorm > self.cfg.max_grad_norm {
            self.cfg.max_grad_norm / gnorm
        } else {
            1.0
        };
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for group in &self.groups {
            let lr = group.lr * lr_factor;
            for &id in &group.ids {
                let Some(g) = grads.param(id) else { continue };
                let decay = decays(store, id);
                let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                let w = store.value_mut(id).data_mut();
                for i in 0..w.len() {
                    let gi = g[i] * clip;
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                    let upd = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                    if decay {
                        w[i] -= lr * c.weight_decay * w[i];
                    }
                    w[i] -= lr * upd;
                }
            }
        }
        gnorm
    }

    /// Applies only the decoupled decay term, leaving moments untouched.
    pub fn decay_only(&self, store: &mut ParamStore, lr_factor: f64) {
        for group in &self.groups {
            let k = group.lr * lr_factor * self.cfg.weight_decay;
            for &id in &group.ids {
                if decays(store, id) {
                    store.value_mut(id).data_mut().iter_mut().for_each(|w| *w -= k * *w);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::{Graph, Tensor};

    #[test]
    fn schedule_warms_up_then_decays() {
        assert!((schedule(0, 100, 0.1) - 0.1).abs() < 1e-12);
        assert!((schedule(9, 100, 0.1) - 1.0).abs() < 1e-12);
        assert!((schedule(10, 100, 0.1) - 1.0).abs() < 1e-12);
        assert!((schedule(55, 100, 0.1) - 0.5).abs() < 1e-12);
        assert!(schedule(99, 100, 0.1) < 0.01);
        assert_eq!(schedule(5, 0, 0.1), 1.0);
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2, 1], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(OptimConfig { weight_decay: 0.0, ..Default::default() }, vec![ParamGroup { ids: vec![id], lr: 0.1 }]);
        for _ in 0..300 {
            let grads = {
                let mut g = Graph::new(&store);
                let w = g.param(id);
                let sq = g.mul(w, w);
                let l = g.sum(sq);
                g.backward(l).unwrap()
            };
            opt.step(&mut store, &grads, 1.0);
        }
        assert!(store.value(id).data().iter().all(|x| x.abs() < 0.05));
    }

    #[test]
    fn decay_only_shrinks_matrices_and_keeps_vectors() {
        let mut store = ParamStore::new();
        let m = store.add("m", Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap()).unwrap();
        let b = store.add("b", Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        let opt = AdamW::new(OptimConfig::default(), vec![ParamGroup { ids: vec![m, b], lr: 0.5 }]);
        opt.decay_only(&mut store, 1.0);
        assert_eq!(store.value(m).data(), &[0.995, 0.995]);
        assert_eq!(store.value(b).data(), &[1.0, 1.0]);
        assert_eq!(opt.steps(), 0);
    }
}
