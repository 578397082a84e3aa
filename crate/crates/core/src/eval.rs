//! Greedy evaluation: accuracy, format validity and attention KL.

use std::collections::BTreeMap;

use diffcore::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::format::parse;
use crate::generate::{GenCaps, Generation, LatentMode};
use crate::model::{DlrModel, ModelError};
use crate::reward::{mean_step_kl, outcome_reward};
use crate::synth::{Family, TaskInstance};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyStats {
    pub count: usize,
    pub accuracy: f64,
    pub format_valid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub count: usize,
    pub accuracy: f64,
    pub format_valid: f64,
    /// Mean over tasks of the per-step KL(oracle || grounder attention).
    pub mean_kl: f64,
    pub per_family: BTreeMap<String, FamilyStats>,
}

#[derive(Debug, Clone)]
pub struct TaskResult {
    pub correct: bool,
    pub valid: bool,
    pub kl: f64,
    pub generation: Generation,
}

pub fn run_task(model: &DlrModel, store: &ParamStore, task: &TaskInstance, caps: GenCaps) -> Result<TaskResult, ModelError> {
    let q = model.vocab.encode(&task.question_words()).map_err(|e| ModelError::Config(e.to_string()))?;
    // Mean mode never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let generation = model.generate(store, &task.image, &q, LatentMode::Mean, &mut rng, caps)?;
    let valid = !generation.truncated && parse(&generation.tokens, &model.vocab).is_ok();
    let correct = outcome_reward(&generation.tokens, generation.truncated, task, &model.vocab) > 0.0;
    let attn: Vec<Vec<f64>> = generation.steps.iter().map(|s| s.attn.clone()).collect();
    let kl = mean_step_kl(&attn, &task.oracle_masks);
    Ok(TaskResult { correct, valid, kl, generation })
}

pub fn evaluate(model: &DlrModel, store: &ParamStore, tasks: &[TaskInstance], caps: GenCaps) -> Result<EvalReport, ModelError> {
    let mut fam: BTreeMap<String, (usize, usize, usize)> =
        Family::ALL.iter().map(|f| (f.name().to_string(), (0, 0, 0))).collect();
    let (mut correct, mut valid, mut kl) = (0usize, 0usize, 0.0);
    for task in tasks {
        let r = run_task(model, store, task, caps)?;
        correct += usize::from(r.correct);
        valid += usize::from(r.valid);
        kl += r.kl;
        let e = fam.entry(task.family.name().to_string()).or_default();
        e.0 += 1;
        e.1 += usize::from(r.correct);
        e.2 += usize::from(r.valid);
    }
    let n = tasks.len().max(1) as f64;
    let per_family = fam
        .into_iter()
        .map(|(k, (c, a, v))| {
            let d = c.max(1) as f64;
            (k, FamilyStats { count: c, accuracy: a as f64 / d, format_valid: v as f64 / d })
        })
        .collect();
    Ok(EvalReport {
        count: tasks.len(),
        accuracy: correct as f64 / n,
        format_valid: valid as f64 / n,
        mean_kl: kl / n,
        per_family,
    })
}
