//! Contrastive grounder pretraining against answer embeddings. The VLM is
//! frozen, so image features and text embeddings are computed once.

use diffcore::functional::{dot, l2_normalize};
use diffcore::{DiffError, Graph, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::format::Vocab;
use crate::metrics::Metrics;
use crate::model::DlrModel;
use crate::optim::{schedule, AdamW, OptimConfig, ParamGroup};
use crate::synth::TaskInstance;
use crate::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub tau: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { tau: 0.07, batch: 64, epochs: 30, lr: 3e-3 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.tau > 0.0) || self.batch < 2 || self.epochs == 0 || !(self.lr > 0.0) {
            return Err(TrainError::Config(format!("stage1 needs tau>0, batch>=2, epochs>0, lr>0: {self:?}")));
        }
        Ok(())
    }
}

/// Normalized mean of unit rows.
pub fn pool_latents(mu: &[f64], d: usize) -> Result<Vec<f64>, DiffError> {
    if d == 0 || mu.is_empty() || mu.len() % d != 0 {
        return Err(DiffError::ShapeMismatch(format!("{} values are not rows of width {d}", mu.len())));
    }
    let rows = mu.len() / d;
    let mut mean = vec![0.0; d];
    for row in mu.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / rows as f64);
    }
    l2_normalize(&mean)
}

pub fn pool_graph(g: &mut Graph, mu: Var) -> Result<Var, DiffError> {
    let m = g.mean_rows(mu);
    g.l2_normalize_rows(m)
}

/// Symmetric in-batch contrastive loss over `n` matched unit rows.
pub fn infonce(z: &[f64], h: &[f64], d: usize, tau: f64) -> Result<f64, DiffError> {
    if z.len() != h.len() || d == 0 || z.len() % d != 0 || z.is_empty() {
        return Err(DiffError::ShapeMismatch(format!("infonce inputs {} vs {} (width {d})", z.len(), h.len())));
    }
    let n = z.len() / d;
    let sim = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] = dot(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d]) / tau;
            }
        }
        s
    };
    let targets: Vec<usize> = (0..n).collect();
    let mask = vec![true; n];
    let a = diffcore::functional::masked_cross_entropy(&sim(z, h), n, &targets, &mask)?;
    let b = diffcore::functional::masked_cross_entropy(&sim(h, z), n, &targets, &mask)?;
    Ok(0.5 * (a + b))
}

pub fn infonce_graph(g: &mut Graph, z: Var, h: Var, tau: f64) -> Result<Var, DiffError> {
    let (n, _) = g.dims(z);
    if g.dims(h) != g.dims(z) {
        return Err(DiffError::ShapeMismatch(format!("infonce {:?} vs {:?}", g.dims(z), g.dims(h))));
    }
    let targets: Vec<usize> = (0..n).collect();
    let mask = vec![true; n];
    let zh = g.matmul_t(z, h);
    let zh = g.scale(zh, 1.0 / tau);
    let hz = g.matmul_t(h, z);
    let hz = g.scale(hz, 1.0 / tau);
    let a = g.masked_cross_entropy(zh, &targets, &mask)?;
    let b = g.masked_cross_entropy(hz, &targets, &mask)?;
    let s = g.add(a, b);
    Ok(g.scale(s, 0.5))
}

/// Row-wise retrieval accuracy: row i hits when its most similar column
/// carries the same answer text as row i.
pub fn retrieval_top1(z: &[f64], h: &[f64], d: usize, answers: &[&str]) -> f64 {
    let n = answers.len();
    let mut hits = 0;
    for i in 0..n {
        let zi = &z[i * d..(i + 1) * d];
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for j in 0..n {
            let s = dot(zi, &h[j * d..(j + 1) * d]);
            if s > best_s {
                best_s = s;
                best = j;
            }
        }
        hits += usize::from(answers[best] == answers[i]);
    }
    hits as f64 / n as f64
}

/// Frozen-backbone inputs for one task.
#[derive(Debug, Clone)]
pub struct PretrainItem {
    pub features: Vec<f64>,
    pub h_q: Vec<f64>,
    /// Unit-normalized answer embedding.
    pub h_a: Vec<f64>,
    pub answer: String,
}

fn text_embedding(model: &DlrModel, store: &ParamStore, words: &[String]) -> Result<Vec<f64>, TrainError> {
    let vocab: &Vocab = &model.vocab;
    let mut toks = vec![vocab.bos];
    toks.extend(vocab.encode(words).map_err(|e| TrainError::Data(e.to_string()))?);
    let mut g = Graph::inference(store);
    let h = model.vlm.last_valid_hidden(&mut g, &toks, vocab.pad)?;
    Ok(g.value(h).to_vec())
}

pub fn prepare(model: &DlrModel, store: &ParamStore, tasks: &[TaskInstance]) -> Result<Vec<PretrainItem>, TrainError> {
    tasks
        .iter()
        .map(|t| {
            let answer_words: Vec<String> = t.answer.split_whitespace().map(str::to_string).collect();
            Ok(PretrainItem {
                features: model.image_features(store, &t.image)?,
                h_q: text_embedding(model, store, &t.question_words())?,
                h_a: l2_normalize(&text_embedding(model, store, &answer_words)?)?,
                answer: t.answer.clone(),
            })
        })
        .collect()
}

/// Loss, pooled latents and top-1 for one batch, built on `g`.
fn batch_graph(
    g: &mut Graph,
    model: &DlrModel,
    items: &[&PretrainItem],
    tau: f64,
) -> Result<(Var, Vec<f64>, f64), TrainError> {
    let d = model.vlm.cfg.d;
    let m = model.vlm.cfg.patches();
    let mut pooled = Vec::with_capacity(items.len());
    for it in items {
        let v = g.input(m, d, it.features.clone());
        let c = g.input(1, d, it.h_q.clone());
        let out = model.grounder.ground(g, v, c)?;
        pooled.push(pool_graph(g, out.mu)?);
    }
    let z = g.concat_rows(&pooled);
    let h_vals: Vec<f64> = items.iter().flat_map(|it| it.h_a.iter().copied()).collect();
    let h = g.input(items.len(), d, h_vals.clone());
    let loss = infonce_graph(g, z, h, tau)?;
    let answers: Vec<&str> = items.iter().map(|it| it.answer.as_str()).collect();
    let top1 = retrieval_top1(g.value(z), &h_vals, d, &answers);
    Ok((loss, g.value(z).to_vec(), top1))
}

/// Mean in-batch top-1 over consecutive batches, in dataset order.
pub fn evaluate(model: &DlrModel, store: &ParamStore, items: &[PretrainItem], cfg: &PretrainConfig) -> Result<(f64, f64), TrainError> {
    let mut loss = 0.0;
    let mut top1 = 0.0;
    let mut batches = 0;
    for chunk in items.chunks(cfg.batch) {
        if chunk.len() < 2 {
            continue;
        }
        let refs: Vec<&PretrainItem> = chunk.iter().collect();
        let mut g = Graph::inference(store);
        let (l, _, t) = batch_graph(&mut g, model, &refs, cfg.tau)?;
        loss += g.scalar(l);
        top1 += t;
        batches += 1;
    }
    let b = batches.max(1) as f64;
    Ok((loss / b, top1 / b))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage1Report {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Mean in-batch top-1 over the last epoch.
    pub train_top1: f64,
    pub dev_top1: Option<f64>,
}

pub fn train_stage1(
    model: &DlrModel,
    store: &mut ParamStore,
    tasks: &[TaskInstance],
    dev: &[TaskInstance],
    cfg: &PretrainConfig,
    optim: &OptimConfig,
    seed: u64,
    metrics: &mut Metrics,
) -> Result<Stage1Report, TrainError> {
    cfg.validate()?;
    if tasks.len() < 2 {
        return Err(TrainError::Data("stage1 needs at least 2 tasks".into()));
    }
    let items = prepare(model, store, tasks)?;
    let dev_items = prepare(model, store, dev)?;
    let grounder = DlrModel::grounder_params(store);
    let mut opt = AdamW::new(*optim, vec![ParamGroup { ids: grounder, lr: cfg.lr }]);
    let per_epoch = items.len().div_ceil(cfg.batch);
    let total = per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_4147_4531);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0;
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    let mut epoch_top1 = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        epoch_top1 = 0.0;
        let mut epoch_batches = 0;
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let refs: Vec<&PretrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let (loss, top1, grads) = {
                let mut g = Graph::new(store);
                let (l, _, t) = batch_graph(&mut g, model, &refs, cfg.tau)?;
                (g.scalar(l), t, g.backward(l)?)
            };
            opt.step(store, &grads, schedule(step, total, optim.warmup_frac));
            if step == 0 {
                first_loss = loss;
            }
            last_loss = loss;
            epoch_top1 += top1;
            epoch_batches += 1;
            metrics.push(json!({ "step": step, "loss": loss, "top1": top1 }));
            step += 1;
        }
        epoch_top1 /= epoch_batches.max(1) as f64;
    }
    let dev_top1 = if dev_items.len() >= 2 {
        let (l, t) = evaluate(model, store, &dev_items, cfg)?;
        metrics.push(json!({ "step": step, "dev_loss": l, "dev_top1": t }));
        Some(t)
    } else {
        None
    };
    Ok(Stage1Report { steps: step, first_loss, final_loss: last_loss, train_top1: epoch_top1, dev_top1 })
}
