mod common;

use diffcore::ParamStore;
use dlr_core::generate::GenCaps;
use dlr_core::metrics::Metrics;
use dlr_core::model::DlrModel;
use dlr_core::optim::{AdamW, OptimConfig};
use dlr_core::reward::RewardConfig;
use dlr_core::sglp::SglpConfig;
use dlr_core::stage3::{
    joint_objective, joint_step, param_groups, rollout_group, train_stage3, RlConfig, RlFlags, RolloutGroup,
};
use dlr_core::synth::{generate_dataset, Family, TaskInstance};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CAPS: GenCaps = GenCaps { max_steps: 2, max_tokens: 80 };

fn setup(seed: u64) -> (DlrModel, ParamStore, TaskInstance) {
    let (model, mut store) = common::minimal_model(seed);
    common::force_premise_close(&model, &mut store, 8.0);
    (model, store, common::task_with_steps(Family::Relational, 2))
}

fn group(model: &DlrModel, store: &ParamStore, task: &TaskInstance, seed: u64) -> RolloutGroup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollout_group(model, store, task, 0, 4, &SglpConfig::default(), &RewardConfig::default(), CAPS, &mut rng).unwrap()
}

fn values(store: &ParamStore, ids: &[diffcore::ParamId]) -> Vec<Vec<f64>> {
    ids.iter().map(|&p| store.value(p).data().to_vec()).collect()
}

/// Mean of z^T mu over a rollout's slots, with mu replayed under `store`.
fn alignment(model: &DlrModel, store: &ParamStore, group: &RolloutGroup, i: usize) -> f64 {
    let gen = &group.rollouts[i].generation;
    let d = model.vlm.cfg.d;
    let (mut sum, mut n) = (0.0, 0);
    for s in &gen.steps {
        let (mu, _) = model.ground_values(store, &gen.image_features, &s.condition).unwrap();
        for (z, m) in s.z.chunks(d).zip(mu.chunks(d)) {
            sum += z.iter().zip(m).map(|(a, b)| a * b).sum::<f64>();
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn group_has_g_rollouts_with_latents_and_centered_advantages() {
    let (model, store, task) = setup(1);
    let g = group(&model, &store, &task, 0);
    assert_eq!(g.rollouts.len(), 4);
    assert!(g.rollouts.iter().all(|r| !r.generation.steps.is_empty()));
    let sum: f64 = g.advantages().iter().sum();
    assert!(sum.abs() < 1e-12);
    assert_eq!(g.snapshot, store.checksum());
}

#[test]
fn identical_seed_gives_identical_group() {
    let (model, store, task) = setup(1);
    let a = group(&model, &store, &task, 7);
    let b = group(&model, &store, &task, 7);
    for (x, y) in a.rollouts.iter().zip(&b.rollouts) {
        assert_eq!(x.generation.tokens, y.generation.tokens);
        let zx: Vec<u64> = x.generation.steps.iter().flat_map(|s| s.z.iter().map(|v| v.to_bits())).collect();
        let zy: Vec<u64> = y.generation.steps.iter().flat_map(|s| s.z.iter().map(|v| v.to_bits())).collect();
        assert_eq!(zx, zy);
        assert_eq!(x.advantage, y.advantage);
    }
    let c = group(&model, &store, &task, 8);
    assert!(a.rollouts.iter().zip(&c.rollouts).any(|(x, y)| x.generation.steps[0].z != y.generation.steps[0].z));
}

#[test]
fn replayed_means_are_bitwise_identical() {
    let (model, store, task) = setup(2);
    let g = group(&model, &store, &task, 1);
    for r in &g.rollouts {
        for s in &r.generation.steps {
            let (mu, attn) = model.ground_values(&store, &r.generation.image_features, &s.condition).unwrap();
            assert_eq!(mu.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), s.mu.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!(attn, s.attn);
        }
    }
}

#[test]
fn sampled_positions_skip_the_forced_block() {
    let (model, store, task) = setup(3);
    let g = group(&model, &store, &task, 2);
    let v = &model.vocab;
    for r in &g.rollouts {
        let gen = &r.generation;
        for &p in &gen.sampled_positions() {
            assert!(p >= gen.prompt_len);
            let t = gen.tokens[p];
            assert!(!v.is_placeholder(t));
            assert_ne!(t, v.id("<vis_thought>").unwrap());
            assert_ne!(t, v.id("</vis_thought>").unwrap());
        }
    }
}

#[test]
fn first_replay_has_unit_ratios_and_exact_text_value() {
    let (model, store, task) = setup(4);
    let mut g = group(&model, &store, &task, 3);
    let adv = [0.75, -0.25, 0.5, -1.0];
    for (r, a) in g.rollouts.iter_mut().zip(adv) {
        r.advantage = a;
    }
    let norm = CAPS.max_tokens as f64;
    let (_, _, jt, jl, stats) = joint_objective(&store, &model, &task, &mut g, &SglpConfig::default(), norm, true).unwrap();
    assert_eq!(stats.clip_frac(), 0.0);
    assert!((stats.mean() - 1.0).abs() < 1e-12);
    let expect: f64 =
        g.rollouts.iter().map(|r| r.advantage * r.generation.sampled_positions().len() as f64).sum::<f64>() / (4.0 * norm);
    assert!((jt - expect).abs() < 1e-12, "{jt} vs {expect}");
    // Every latent ratio is one, so the latent term is the slot-weighted mean advantage.
    let slots: Vec<f64> = g.rollouts.iter().map(|r| r.generation.steps.len() as f64 * 4.0).collect();
    let jl_expect = g.rollouts.iter().zip(&slots).map(|(r, s)| r.advantage * s).sum::<f64>() / slots.iter().sum::<f64>();
    assert!((jl - jl_expect).abs() < 1e-12);
    assert!(g.old_logp.iter().all(Option::is_some));
}

#[test]
fn zero_advantages_only_decay() {
    let (model, mut store, task) = setup(5);
    let mut g = group(&model, &store, &task, 4);
    for r in &mut g.rollouts {
        r.advantage = 0.0;
    }
    let cfg = RlConfig::default();
    let groups = param_groups(&store, &cfg, RlFlags::default());
    let mut reference = store.clone();
    let opt_cfg = OptimConfig::default();
    AdamW::new(opt_cfg, groups.clone()).decay_only(&mut reference, 1.0);
    let mut opt = AdamW::new(opt_cfg, groups);
    let s = joint_step(&model, &mut store, &mut opt, &task, &mut g, &SglpConfig::default(), 80.0, true, 1.0).unwrap();
    assert!(s.skipped);
    assert_eq!(store.checksum(), reference.checksum());

    let mut g = group(&model, &store, &task, 4);
    for r in &mut g.rollouts {
        r.advantage = 0.0;
    }
    let before = store.checksum();
    let mut opt = AdamW::new(OptimConfig { weight_decay: 0.0, ..opt_cfg }, param_groups(&store, &cfg, RlFlags::default()));
    joint_step(&model, &mut store, &mut opt, &task, &mut g, &SglpConfig::default(), 80.0, true, 1.0).unwrap();
    assert_eq!(store.checksum(), before);
}

#[test]
fn frozen_latent_policy_leaves_grounder_untouched() {
    let (model, mut store, task) = setup(6);
    let mut g = group(&model, &store, &task, 5);
    let adv = [1.0, -1.0, 0.5, -0.5];
    for (r, a) in g.rollouts.iter_mut().zip(adv) {
        r.advantage = a;
    }
    let flags = RlFlags { freeze_latent_policy: true, ..RlFlags::default() };
    let cfg = RlConfig { lr: 1e-3, ..RlConfig::default() };
    let grounder = DlrModel::grounder_params(&store);
    let vlm = DlrModel::vlm_params(&store);
    let (g0, v0) = (values(&store, &grounder), values(&store, &vlm));
    let mut opt = AdamW::new(OptimConfig::default(), param_groups(&store, &cfg, flags));
    let s = joint_step(&model, &mut store, &mut opt, &task, &mut g, &SglpConfig::default(), 80.0, false, 1.0).unwrap();
    assert_eq!(s.j_latent, 0.0);
    assert_eq!(values(&store, &grounder), g0);
    assert_ne!(values(&store, &vlm), v0);
}

#[test]
fn positive_advantage_step_raises_alignment() {
    let (model, mut store, task) = setup(7);
    let mut g = group(&model, &store, &task, 6);
    for (i, r) in g.rollouts.iter_mut().enumerate() {
        r.advantage = if i == 0 { 1.0 } else { 0.0 };
    }
    let before = alignment(&model, &store, &g, 0);
    let cfg = RlConfig { lr: 1e-5, ..RlConfig::default() };
    let mut opt = AdamW::new(OptimConfig::default(), param_groups(&store, &cfg, RlFlags::default()));
    let s = joint_step(&model, &mut store, &mut opt, &task, &mut g, &SglpConfig::default(), 80.0, true, 1.0).unwrap();
    assert_eq!(s.clip_frac, 0.0);
    let after = alignment(&model, &store, &g, 0);
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn no_focus_reward_reduces_to_outcome() {
    let (model, store, task) = setup(8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reward = RewardConfig { beta: 0.0, ..RewardConfig::default() };
    let g = rollout_group(&model, &store, &task, 0, 4, &SglpConfig::default(), &reward, CAPS, &mut rng).unwrap();
    for r in &g.rollouts {
        assert_eq!(r.reward.total, r.reward.outcome);
    }
}

fn short_run(flags: RlFlags, seed: u64) -> (u64, Vec<String>) {
    let (model, mut store) = common::minimal_model(9);
    common::force_premise_close(&model, &mut store, 4.0);
    let tasks = generate_dataset(0, 4, &Family::ALL, 4).unwrap();
    let dev = generate_dataset(50, 2, &Family::ALL, 4).unwrap();
    let cfg = RlConfig { iterations: 3, eval_every: 2, lr: 1e-4, ..RlConfig::default() };
    let mut metrics = Metrics::new();
    let r = train_stage3(
        &model, &mut store, &tasks, &dev, &cfg, &SglpConfig::default(), &RewardConfig::default(),
        &OptimConfig::default(), CAPS, flags, seed, &mut metrics,
    )
    .unwrap();
    assert_eq!(r.iterations, 3);
    assert!(r.initial.is_some() && r.last.is_some());
    (store.checksum(), metrics.lines().to_vec())
}

#[test]
fn training_logs_every_iteration_and_is_reproducible() {
    let (ck, lines) = short_run(RlFlags::default(), 1);
    assert_eq!(lines.len(), 4);
    let recs: Vec<serde_json::Value> = lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs[0]["iter"], 0);
    for k in ["iter", "mean_reward", "frac_correct", "mean_focus", "J_text", "J_latent", "clip_frac", "eval_acc", "eval_kl"] {
        assert!(recs[1].get(k).is_some(), "{k}");
    }
    assert!(recs[1]["eval_acc"].is_null());
    assert!(recs[2]["eval_acc"].is_number());
    assert!(recs[3]["eval_acc"].is_number());
    assert_eq!(short_run(RlFlags::default(), 1), (ck, lines));
}

#[test]
fn frozen_run_keeps_grounder() {
    let (model, mut store) = common::minimal_model(9);
    common::force_premise_close(&model, &mut store, 4.0);
    let grounder = DlrModel::grounder_params(&store);
    let g0 = values(&store, &grounder);
    let tasks = generate_dataset(0, 3, &Family::ALL, 4).unwrap();
    let cfg = RlConfig { iterations: 3, lr: 1e-4, ..RlConfig::default() };
    let flags = RlFlags { freeze_latent_policy: true, no_focus_reward: false };
    let mut metrics = Metrics::new();
    train_stage3(
        &model, &mut store, &tasks, &[], &cfg, &SglpConfig::default(), &RewardConfig::default(),
        &OptimConfig::default(), CAPS, flags, 0, &mut metrics,
    )
    .unwrap();
    assert_eq!(values(&store, &grounder), g0);
    for r in metrics.records() {
        assert_eq!(r["J_latent"], 0.0);
    }
}
