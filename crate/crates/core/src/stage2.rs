//! Supervised finetuning on gold trajectories with the two-pass latent
//! injection: each step's condition is read from a prefix forward that
//! already contains the earlier injected blocks.

use diffcore::{Gradients, Graph, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::eval::{evaluate, EvalReport};
use crate::format::{parse_spans, render, supervision_mask, StepSpan, TokenId};
use crate::generate::GenCaps;
use crate::metrics::Metrics;
use crate::model::DlrModel;
use crate::optim::{schedule, AdamW, OptimConfig, ParamGroup};
use crate::synth::{GridImage, TaskInstance};
use crate::vlm::Injection;
use crate::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Number of dev tasks used for periodic greedy evaluation.
    pub dev_count: usize,
    /// Optimizer steps between dev evaluations; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { lr: 1e-3, epochs: 3, batch: 8, dev_count: 500, eval_every: 0 }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch == 0 {
            return Err(TrainError::Config(format!("stage2 needs lr>0, epochs>0, batch>0: {self:?}")));
        }
        Ok(())
    }
}

/// A rendered gold trajectory with its supervision mask and step positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub task: usize,
    pub tokens: Vec<TokenId>,
    pub mask: Vec<bool>,
    pub spans: Vec<StepSpan>,
}

pub fn make_example(model: &DlrModel, task: &TaskInstance, index: usize) -> Result<SftExample, TrainError> {
    let v = &model.vocab;
    let traj = task.gold_trajectory.without_latents();
    let tokens = render(&task.question_words(), &traj, v).map_err(|e| TrainError::Data(e.to_string()))?;
    let (_, spans) = parse_spans(&tokens, v)?;
    let mask = supervision_mask(&tokens, v)?;
    Ok(SftExample { task: index, tokens, mask, spans })
}

#[derive(Debug, Clone)]
pub struct TwoPass {
    pub logits: Var,
    /// Forward passes over the decoder: one per step plus the final one.
    pub passes: usize,
    pub mus: Vec<Var>,
    pub attns: Vec<Vec<f64>>,
}

/// Sequential capture of every step's condition, then one full forward.
pub fn two_pass_forward(
    g: &mut Graph,
    model: &DlrModel,
    tokens: &[TokenId],
    spans: &[StepSpan],
    image: &GridImage,
) -> Result<TwoPass, TrainError> {
    let v = model.vlm.encode_image(g, image)?;
    let mut injections = Vec::with_capacity(spans.len());
    let mut mus = Vec::with_capacity(spans.len());
    let mut attns = Vec::with_capacity(spans.len());
    let mut passes = 0;
    for span in spans {
        let pc = span.premise_close;
        let h = model.vlm.forward(g, &tokens[..=pc], &injections, Some(v))?;
        passes += 1;
        let s = g.slice_rows(h, pc, pc + 1);
        let out = model.grounder.ground(g, v, s)?;
        injections.push(Injection { start: span.block_start, rows: out.mu });
        mus.push(out.mu);
        attns.push(out.attn);
    }
    let h = model.vlm.forward(g, tokens, &injections, Some(v))?;
    passes += 1;
    let logits = model.vlm.logits(g, h);
    Ok(TwoPass { logits, passes, mus, attns })
}

/// Next-token CE over supervised positions.
pub fn sft_loss(g: &mut Graph, logits: Var, tokens: &[TokenId], mask: &[bool]) -> Result<Var, TrainError> {
    let t = tokens.len();
    if g.dims(logits).0 != t || mask.len() != t || t < 2 {
        return Err(TrainError::Diff(diffcore::DiffError::ShapeMismatch(format!(
            "{} logit rows for {t} tokens and {} mask flags",
            g.dims(logits).0,
            mask.len()
        ))));
    }
    let body = g.slice_rows(logits, 0, t - 1);
    Ok(g.masked_cross_entropy(body, &tokens[1..], &mask[1..])?)
}

/// (correct, counted) argmax predictions over supervised positions.
pub fn teacher_forced_hits(logits: &[f64], vocab: usize, tokens: &[TokenId], mask: &[bool]) -> (usize, usize) {
    let mut hits = 0;
    let mut n = 0;
    for i in 0..tokens.len() - 1 {
        if !mask[i + 1] {
            continue;
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        hits += usize::from(crate::generate::argmax(row) == tokens[i + 1]);
        n += 1;
    }
    (hits, n)
}

/// Loss, hit counts and gradients for one example.
pub fn example_step(
    model: &DlrModel,
    store: &ParamStore,
    ex: &SftExample,
    image: &GridImage,
    grad: bool,
) -> Result<(f64, (usize, usize), Option<Gradients>), TrainError> {
    let mut g = if grad { Graph::new(store) } else { Graph::inference(store) };
    let tp = two_pass_forward(&mut g, model, &ex.tokens, &ex.spans, image)?;
    let loss = sft_loss(&mut g, tp.logits, &ex.tokens, &ex.mask)?;
    let hits = teacher_forced_hits(g.value(tp.logits), model.vocab.len(), &ex.tokens, &ex.mask);
    let grads = if grad { Some(g.backward(loss)?) } else { None };
    Ok((g.scalar(loss), hits, grads))
}

/// Teacher-forced loss and token accuracy over a task list.
pub fn teacher_forced_eval(model: &DlrModel, store: &ParamStore, tasks: &[TaskInstance]) -> Result<(f64, f64), TrainError> {
    let (mut loss, mut hits, mut n) = (0.0, 0, 0);
    for (i, t) in tasks.iter().enumerate() {
        let ex = make_example(model, t, i)?;
        let (l, (h, c), _) = example_step(model, store, &ex, &t.image, false)?;
        loss += l;
        hits += h;
        n += c;
    }
    Ok((loss / tasks.len().max(1) as f64, hits as f64 / n.max(1) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage2Report {
    pub steps: usize,
    pub final_loss: f64,
    pub dev_tf_acc: f64,
    pub dev: Option<EvalReport>,
}

#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    model: &DlrModel,
    store: &mut ParamStore,
    tasks: &[TaskInstance],
    dev: &[TaskInstance],
    cfg: &SftConfig,
    optim: &OptimConfig,
    caps: GenCaps,
    seed: u64,
    metrics: &mut Metrics,
) -> Result<Stage2Report, TrainError> {
    cfg.validate()?;
    let examples = tasks.iter().enumerate().map(|(i, t)| make_example(model, t, i)).collect::<Result<Vec<_>, _>>()?;
    if examples.is_empty() {
        return Err(TrainError::Data("stage2 needs at least one task".into()));
    }
    let dev = &dev[..dev.len().min(cfg.dev_count)];
    let all: Vec<_> = store.ids().collect();
    let mut opt = AdamW::new(*optim, vec![ParamGroup { ids: all, lr: cfg.lr }]);
    let total = examples.len().div_ceil(cfg.batch) * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_4147_4532);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    let mut last_loss = f64::NAN;
    let mut last_eval = None;
    let mut dev_tf_acc = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let mut acc = Gradients::default();
            let (mut loss, mut hits, mut n) = (0.0, 0, 0);
            for &i in chunk {
                let ex = &examples[i];
                let (l, (h, c), g) = example_step(model, store, ex, &tasks[ex.task].image, true)?;
                acc.merge(&g.expect("gradients requested"));
                loss += l;
                hits += h;
                n += c;
            }
            acc.scale(1.0 / chunk.len() as f64);
            let gnorm = opt.step(store, &acc, schedule(step, total, optim.warmup_frac));
            loss /= chunk.len() as f64;
            last_loss = loss;
            let tf_acc = hits as f64 / n.max(1) as f64;
            step += 1;
            let mut rec = json!({ "step": step, "loss": loss, "tf_acc": tf_acc, "grad_norm": gnorm });
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < total && !dev.is_empty() {
                let r = evaluate(model, store, dev, caps)?;
                rec["fmt_valid"] = json!(r.format_valid);
                rec["dev_acc"] = json!(r.accuracy);
                last_eval = Some(r);
            }
            metrics.push(rec);
        }
    }
    if !dev.is_empty() {
        let (dl, da) = teacher_forced_eval(model, store, dev)?;
        dev_tf_acc = da;
        let r = evaluate(model, store, dev, caps)?;
        metrics.push(json!({
            "step": step, "dev_loss": dl, "dev_tf_acc": da, "fmt_valid": r.format_valid,
            "dev_acc": r.accuracy, "dev_kl": r.mean_kl,
        }));
        last_eval = Some(r);
    }
    Ok(Stage2Report { steps: step, final_loss: last_loss, dev_tf_acc, dev: last_eval })
}
