//! Group-relative reinforcement finetuning of the text policy and the
//! latent policy together.
//!
//! Each iteration samples a group of trajectories for one task, scores them,
//! centers the rewards, and ascends the sum of two clipped surrogates: one
//! over sampled text tokens (decoder parameters) and one over the injected
//! latent vectors (grounder parameters).

use diffcore::{Graph, ParamId, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::eval::{evaluate, EvalReport};
use crate::generate::{GenCaps, Generation, LatentMode};
use crate::metrics::Metrics;
use crate::model::DlrModel;
use crate::optim::{schedule, AdamW, OptimConfig, ParamGroup};
use crate::reward::{breakdown, focus_reward, outcome_reward, RewardBreakdown, RewardConfig};
use crate::sglp::{clipped_sum_graph, group_advantages, ratio_graph, SglpConfig};
use crate::synth::TaskInstance;
use crate::vlm::Injection;
use crate::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    /// Decoder learning rate.
    pub lr: f64,
    /// Grounder learning rate as a multiple of `lr`.
    pub grounder_lr_mult: f64,
    pub group_size: usize,
    pub inner_epochs: usize,
    /// Number of rollout groups, one task each.
    pub iterations: usize,
    /// Iterations between dev evaluations; 0 evaluates only before and after.
    pub eval_every: usize,
    pub dev_count: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            grounder_lr_mult: 10.0,
            group_size: 4,
            inner_epochs: 1,
            iterations: 2000,
            eval_every: 0,
            dev_count: 500,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) || !(self.grounder_lr_mult >= 0.0) || self.group_size < 2 || self.inner_epochs == 0 {
            return Err(TrainError::Config(format!(
                "stage3 needs lr>0, grounder_lr_mult>=0, group_size>=2, inner_epochs>0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RlFlags {
    pub no_focus_reward: bool,
    pub freeze_latent_policy: bool,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub generation: Generation,
    pub reward: RewardBreakdown,
    pub advantage: f64,
}

#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub task: usize,
    pub rollouts: Vec<Rollout>,
    /// Checksum of the parameters that produced the rollouts.
    pub snapshot: u64,
    /// Per-rollout log-probabilities of sampled text tokens under the
    /// snapshot, filled by the first replay.
    pub old_logp: Vec<Option<Vec<f64>>>,
}

impl RolloutGroup {
    pub fn advantages(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.advantage).collect()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn rollout_group<R: Rng + ?Sized>(
    model: &DlrModel,
    store: &ParamStore,
    task: &TaskInstance,
    task_index: usize,
    group_size: usize,
    sglp: &SglpConfig,
    reward: &RewardConfig,
    caps: GenCaps,
    rng: &mut R,
) -> Result<RolloutGroup, TrainError> {
    let q = model.vocab.encode(&task.question_words()).map_err(|e| TrainError::Data(e.to_string()))?;
    let mut gens = Vec::with_capacity(group_size);
    let mut rewards = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let gen = model.generate(store, &task.image, &q, LatentMode::Sample { sigma: sglp.sigma }, rng, caps)?;
        let outcome = outcome_reward(&gen.tokens, gen.truncated, task, &model.vocab);
        let attn: Vec<Vec<f64>> = gen.steps.iter().map(|s| s.attn.clone()).collect();
        let focus = focus_reward(&attn, &task.oracle_masks, reward.lambda);
        rewards.push(breakdown(outcome, focus, reward));
        gens.push(gen);
    }
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    let adv = group_advantages(&totals)?;
    let rollouts = gens
        .into_iter()
        .zip(rewards)
        .zip(adv)
        .map(|((generation, reward), advantage)| Rollout { generation, reward, advantage })
        .collect();
    Ok(RolloutGroup { task: task_index, rollouts, snapshot: store.checksum(), old_logp: vec![None; group_size] })
}

/// Log-probabilities of the policy-chosen text tokens of one rollout,
/// teacher-forced with its injected vectors held constant.
pub fn text_logp(g: &mut Graph, model: &DlrModel, task: &TaskInstance, gen: &Generation) -> Result<Option<Var>, TrainError> {
    let positions = gen.sampled_positions();
    if positions.is_empty() {
        return Ok(None);
    }
    let d = model.vlm.cfg.d;
    // The last sampled token needs logits only up to the position before it.
    let end = positions[positions.len() - 1];
    let v = model.vlm.encode_image(g, &task.image)?;
    let injections: Vec<Injection> = gen
        .steps
        .iter()
        .filter(|s| s.block_start < end)
        .map(|s| Injection { start: s.block_start, rows: g.input(s.z.len() / d, d, s.z.clone()) })
        .collect();
    let h = model.vlm.forward(g, &gen.tokens[..end], &injections, Some(v))?;
    let prev: Vec<usize> = positions.iter().map(|p| p - 1).collect();
    let rows = g.gather(h, &prev);
    let logits = model.vlm.logits(g, rows);
    let lsm = g.log_softmax_rows(logits)?;
    let targets: Vec<usize> = positions.iter().map(|&p| gen.tokens[p]).collect();
    Ok(Some(g.pick(lsm, targets)))
}

/// Sum over all rollouts and sampled tokens of the clipped text surrogate.
/// Fills missing old log-probabilities with the current (detached) values.
fn text_objective(
    g: &mut Graph,
    model: &DlrModel,
    task: &TaskInstance,
    group: &mut RolloutGroup,
    clip_eps: f64,
    stats: &mut RatioStats,
) -> Result<Option<Var>, TrainError> {
    let mut total: Option<Var> = None;
    for (i, r) in group.rollouts.iter().enumerate() {
        let Some(logp) = text_logp(g, model, task, &r.generation)? else { continue };
        let cur = g.value(logp).to_vec();
        let old = group.old_logp[i].get_or_insert_with(|| cur.clone()).clone();
        if old.len() != cur.len() {
            return Err(TrainError::Data("stored log-probabilities do not match the rollout".into()));
        }
        let k = old.len();
        let old_v = g.input(k, 1, old);
        let diff = g.sub(logp, old_v);
        let ratio = g.exp_clamped(diff, -crate::sglp::RATIO_EXP_CLAMP, crate::sglp::RATIO_EXP_CLAMP);
        stats.observe(g.value(ratio), clip_eps);
        let s = clipped_sum_graph(g, ratio, vec![r.advantage; k], clip_eps);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    Ok(total)
}

/// Mean clipped latent surrogate over every (rollout, step, slot), with the
/// mean directions recomputed from stored features and conditions.
pub fn latent_objective(
    g: &mut Graph,
    model: &DlrModel,
    group: &RolloutGroup,
    sglp: &SglpConfig,
    stats: &mut RatioStats,
) -> Result<Option<Var>, TrainError> {
    let d = model.vlm.cfg.d;
    let m = model.vlm.cfg.patches();
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for r in &group.rollouts {
        if r.generation.steps.is_empty() {
            continue;
        }
        let v = g.input(m, d, r.generation.image_features.clone());
        for s in &r.generation.steps {
            let c = g.input(1, d, s.condition.clone());
            let out = model.grounder.ground(g, v, c)?;
            let ratios = ratio_graph(g, &s.z, out.mu, &s.mu, sglp.sigma)?;
            stats.observe(g.value(ratios), sglp.clip_eps);
            let rows = s.z.len() / d;
            count += rows;
            let term = clipped_sum_graph(g, ratios, vec![r.advantage; rows], sglp.clip_eps);
            total = Some(match total {
                Some(t) => g.add(t, term),
                None => term,
            });
        }
    }
    Ok(total.map(|t| g.scale(t, 1.0 / count as f64)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RatioStats {
    pub count: usize,
    pub clipped: usize,
    pub sum: f64,
}

impl RatioStats {
    fn observe(&mut self, ratios: &[f64], eps: f64) {
        for &r in ratios {
            self.count += 1;
            self.sum += r;
            self.clipped += usize::from((r - 1.0).abs() > eps);
        }
    }

    pub fn clip_frac(&self) -> f64 {
        self.clipped as f64 / self.count.max(1) as f64
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            1.0
        } else {
            self.sum / self.count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JointStats {
    pub j_text: f64,
    pub j_latent: f64,
    pub mean_ratio: f64,
    pub clip_frac: f64,
    /// True when every advantage was zero and only weight decay was applied.
    pub skipped: bool,
}

/// Builds `J_text + J_latent` on a fresh graph. `text_norm` is the fixed
/// per-trajectory token normalizer.
#[allow(clippy::too_many_arguments)]
pub fn joint_objective<'p>(
    store: &'p ParamStore,
    model: &DlrModel,
    task: &TaskInstance,
    group: &mut RolloutGroup,
    sglp: &SglpConfig,
    text_norm: f64,
    include_latent: bool,
) -> Result<(Graph<'p>, Option<Var>, f64, f64, RatioStats), TrainError> {
    let mut g = Graph::new(store);
    let mut stats = RatioStats::default();
    let n = group.rollouts.len() as f64;
    let text = text_objective(&mut g, model, task, group, sglp.clip_eps, &mut stats)?
        .map(|t| g.scale(t, 1.0 / (n * text_norm)));
    let latent = if include_latent { latent_objective(&mut g, model, group, sglp, &mut stats)? } else { None };
    let jt = text.map_or(0.0, |t| g.scalar(t));
    let jl = latent.map_or(0.0, |t| g.scalar(t));
    let obj = match (text, latent) {
        (Some(a), Some(b)) => Some(g.add(a, b)),
        (a, b) => a.or(b),
    };
    Ok((g, obj, jt, jl, stats))
}

#[allow(clippy::too_many_arguments)]
pub fn joint_step(
    model: &DlrModel,
    store: &mut ParamStore,
    opt: &mut AdamW,
    task: &TaskInstance,
    group: &mut RolloutGroup,
    sglp: &SglpConfig,
    text_norm: f64,
    include_latent: bool,
    lr_factor: f64,
) -> Result<JointStats, TrainError> {
    if group.rollouts.iter().all(|r| r.advantage == 0.0) {
        opt.decay_only(store, lr_factor);
        return Ok(JointStats { j_text: 0.0, j_latent: 0.0, mean_ratio: 1.0, clip_frac: 0.0, skipped: true });
    }
    let (grads, jt, jl, stats) = {
        let (mut g, obj, jt, jl, stats) = joint_objective(store, model, task, group, sglp, text_norm, include_latent)?;
        let grads = match obj {
            Some(o) => {
                let loss = g.scale(o, -1.0);
                Some(g.backward(loss)?)
            }
            None => None,
        };
        (grads, jt, jl, stats)
    };
    match grads {
        Some(gr) => {
            opt.step(store, &gr, lr_factor);
        }
        None => opt.decay_only(store, lr_factor),
    }
    Ok(JointStats { j_text: jt, j_latent: jl, mean_ratio: stats.mean(), clip_frac: stats.clip_frac(), skipped: false })
}

pub fn param_groups(store: &ParamStore, cfg: &RlConfig, flags: RlFlags) -> Vec<ParamGroup> {
    let mut groups = vec![ParamGroup { ids: DlrModel::vlm_params(store), lr: cfg.lr }];
    if !flags.freeze_latent_policy {
        let ids: Vec<ParamId> = DlrModel::grounder_params(store);
        groups.push(ParamGroup { ids, lr: cfg.lr * cfg.grounder_lr_mult });
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage3Report {
    pub iterations: usize,
    pub initial: Option<EvalReport>,
    pub last: Option<EvalReport>,
}

#[allow(clippy::too_many_arguments)]
pub fn train_stage3(
    model: &DlrModel,
    store: &mut ParamStore,
    tasks: &[TaskInstance],
    dev: &[TaskInstance],
    cfg: &RlConfig,
    sglp: &SglpConfig,
    reward: &RewardConfig,
    optim: &OptimConfig,
    caps: GenCaps,
    flags: RlFlags,
    seed: u64,
    metrics: &mut Metrics,
) -> Result<Stage3Report, TrainError> {
    cfg.validate()?;
    sglp.validate()?;
    reward.validate().map_err(TrainError::Config)?;
    if tasks.is_empty() {
        return Err(TrainError::Data("stage3 needs at least one task".into()));
    }
    let reward = RewardConfig { beta: if flags.no_focus_reward { 0.0 } else { reward.beta }, ..*reward };
    let dev = &dev[..dev.len().min(cfg.dev_count)];
    let mut opt = AdamW::new(*optim, param_groups(store, cfg, flags));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_4147_4533);
    let mut order: Vec<usize> = Vec::new();
    let text_norm = caps.max_tokens as f64;
    let total = cfg.iterations * cfg.inner_epochs;
    let mut step = 0;
    let initial = if dev.is_empty() { None } else { Some(evaluate(model, store, dev, caps)?) };
    if let Some(r) = &initial {
        metrics.push(json!({ "iter": 0, "eval_acc": r.accuracy, "eval_kl": r.mean_kl, "fmt_valid": r.format_valid }));
    }
    let mut last = initial.clone();
    for iter in 1..=cfg.iterations {
        if order.is_empty() {
            order = (0..tasks.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let ti = order.pop().unwrap();
        let task = &tasks[ti];
        let mut group = rollout_group(model, store, task, ti, cfg.group_size, sglp, &reward, caps, &mut rng)?;
        let mut js = None;
        for _ in 0..cfg.inner_epochs {
            let f = schedule(step, total, optim.warmup_frac);
            js = Some(joint_step(model, store, &mut opt, task, &mut group, sglp, text_norm, !flags.freeze_latent_policy, f)?);
            step += 1;
        }
        let js = js.unwrap();
        let n = group.rollouts.len() as f64;
        let mut rec = json!({
            "iter": iter,
            "mean_reward": group.rollouts.iter().map(|r| r.reward.total).sum::<f64>() / n,
            "frac_correct": group.rollouts.iter().map(|r| r.reward.outcome).sum::<f64>() / n,
            "mean_focus": group.rollouts.iter().map(|r| r.reward.focus).sum::<f64>() / n,
            "J_text": js.j_text,
            "J_latent": js.j_latent,
            "mean_ratio": js.mean_ratio,
            "clip_frac": js.clip_frac,
            "eval_acc": null,
            "eval_kl": null,
        });
        let due = (cfg.eval_every > 0 && iter % cfg.eval_every == 0) || iter == cfg.iterations;
        if due && !dev.is_empty() {
            let r = evaluate(model, store, dev, caps)?;
            rec["eval_acc"] = json!(r.accuracy);
            rec["eval_kl"] = json!(r.mean_kl);
            rec["fmt_valid"] = json!(r.format_valid);
            last = Some(r);
        }
        metrics.push(rec);
    }
    Ok(Stage3Report { iterations: cfg.iterations, initial, last })
}
