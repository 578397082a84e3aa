#![allow(dead_code)]

use diffcore::ParamStore;
use dlr_core::format::PREMISE_CLOSE;
use dlr_core::model::{DlrModel, GrounderConfig, ModelConfig};
use dlr_core::synth::{generate_task, Family, TaskInstance};

/// The minimal configuration used for gradient checks.
pub fn minimal() -> (ModelConfig, GrounderConfig) {
    (
        ModelConfig { d: 16, layers: 1, heads: 2, ffn_mult: 2, grid_size: 4, patch: 4, max_seq: 160, image_cross_attention: true },
        GrounderConfig { latents: 4, heads: 2, ffn_mult: 2 },
    )
}

pub fn minimal_model(seed: u64) -> (DlrModel, ParamStore) {
    let (c, gc) = minimal();
    DlrModel::init(&c, &gc, seed).unwrap()
}

/// First task of `family` on a 4x4 grid with exactly `steps` steps.
pub fn task_with_steps(family: Family, steps: usize) -> TaskInstance {
    (0..1000)
        .map(|s| generate_task(s, family, 4).unwrap())
        .find(|t| t.steps() == steps)
        .expect("generator covers the step count")
}

/// Biases the output head toward `</premise>` so that sampled rollouts
/// always open latent blocks, even from random weights.
pub fn force_premise_close(model: &DlrModel, store: &mut ParamStore, bias: f64) {
    let id = store.id("vlm.head.b").unwrap();
    let tok = model.vocab.id(PREMISE_CLOSE).unwrap();
    store.value_mut(id).data_mut()[tok] += bias;
}

// ---- gradient checks on the minimal config ----

use diffcore::{grad_check, DiffError, Graph};
use dlr_core::generate::{Generation, StepRecord};
use dlr_core::reward::RewardBreakdown;
use dlr_core::sglp::{sample, SglpConfig};
use dlr_core::stage1::{infonce_graph, pool_graph, prepare};
use dlr_core::stage2::{make_example, sft_loss, two_pass_forward};
use dlr_core::stage3::{latent_objective, RatioStats, Rollout, RolloutGroup};
use dlr_core::synth::generate_dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_EPS: f64 = 1e-5;

fn wrap<E: std::fmt::Display>(e: E) -> DiffError {
    DiffError::ShapeMismatch(e.to_string())
}

/// Max relative error of the pooled InfoNCE loss w.r.t. grounder weights.
pub fn infonce_grad_error() -> f64 {
    let (model, mut store) = minimal_model(11);
    let tasks = generate_dataset(0, 4, &Family::ALL, 4).unwrap();
    let items = prepare(&model, &store, &tasks).unwrap();
    let d = model.vlm.cfg.d;
    let m = model.vlm.cfg.patches();
    let ids = DlrModel::grounder_params(&store);
    grad_check(&mut store, &ids, GRAD_EPS, 300, 0, |g| {
        let mut pooled = Vec::new();
        for it in &items {
            let v = g.input(m, d, it.features.clone());
            let c = g.input(1, d, it.h_q.clone());
            let out = model.grounder.ground(g, v, c).map_err(wrap)?;
            pooled.push(pool_graph(g, out.mu)?);
        }
        let z = g.concat_rows(&pooled);
        let h = g.input(items.len(), d, items.iter().flat_map(|it| it.h_a.clone()).collect());
        infonce_graph(g, z, h, 0.07)
    })
    .unwrap()
}

/// Max relative errors of the masked two-pass SFT loss, over all weights
/// and over grounder weights only.
pub fn sft_grad_errors() -> (f64, f64) {
    let (model, mut store) = minimal_model(12);
    let task = task_with_steps(Family::Relational, 2);
    let ex = make_example(&model, &task, 0).unwrap();
    let mut f = |g: &mut Graph| {
        let tp = two_pass_forward(g, &model, &ex.tokens, &ex.spans, &task.image).map_err(wrap)?;
        sft_loss(g, tp.logits, &ex.tokens, &ex.mask).map_err(wrap)
    };
    let all: Vec<_> = store.ids().collect();
    let a = grad_check(&mut store, &all, GRAD_EPS, 400, 1, &mut f).unwrap();
    let grounder = DlrModel::grounder_params(&store);
    let b = grad_check(&mut store, &grounder, GRAD_EPS, 300, 2, &mut f).unwrap();
    (a, b)
}

/// A stored two-step group whose samples came from slightly different
/// grounder weights, so ratios are away from one but unclipped.
pub fn stored_group(model: &DlrModel, store: &ParamStore, sigma: f64) -> RolloutGroup {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = model.vlm.cfg.d;
    let mut old = store.clone();
    for id in DlrModel::grounder_params(store) {
        for x in old.value_mut(id).data_mut() {
            *x += rng.gen_range(-1e-3..1e-3);
        }
    }
    let task = task_with_steps(Family::Relational, 2);
    let features = model.image_features(store, &task.image).unwrap();
    let advantages = [0.75, -0.25, -0.25, -0.25];
    let rollouts = advantages
        .iter()
        .map(|&advantage| {
            let steps = (0..2)
                .map(|_| {
                    let condition: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let (mu, attn) = model.ground_values(&old, &features, &condition).unwrap();
                    let z: Vec<f64> = mu.chunks(d).flat_map(|row| sample(row, sigma, &mut rng).unwrap()).collect();
                    StepRecord { premise_close: 0, block_start: 0, condition, mu, z, attn }
                })
                .collect();
            let generation =
                Generation { tokens: Vec::new(), prompt_len: 0, steps, truncated: false, image_features: features.clone() };
            Rollout { generation, reward: RewardBreakdown { outcome: 0.0, focus: 0.0, total: 0.0 }, advantage }
        })
        .collect();
    RolloutGroup { task: 0, rollouts, snapshot: old.checksum(), old_logp: vec![None; 4] }
}

/// Max relative error of the latent surrogate w.r.t. grounder weights, and
/// the mean ratio of the stored group.
pub fn latent_grad_error(sigma: f64) -> (f64, f64) {
    let (model, mut store) = minimal_model(13);
    let ids = DlrModel::grounder_params(&store);
    let sglp = SglpConfig { sigma, ..SglpConfig::default() };
    let group = stored_group(&model, &store, sigma);
    let mut stats = RatioStats::default();
    {
        let mut g = Graph::inference(&store);
        latent_objective(&mut g, &model, &group, &sglp, &mut stats).unwrap();
    }
    let err = grad_check(&mut store, &ids, GRAD_EPS, 400, 4, |g| {
        let mut s = RatioStats::default();
        latent_objective(g, &model, &group, &sglp, &mut s).map_err(wrap)?.ok_or_else(|| wrap("no latent slots"))
    })
    .unwrap();
    (err, stats.mean())
}
