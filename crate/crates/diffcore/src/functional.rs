//! Value-level versions of the graph ops, for code that needs no gradients.

use crate::error::{DiffError, Result};
use crate::graph::{log_sum_exp, softmax_in_place, NORM_FLOOR};

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    l2_normalize_with_floor(v, NORM_FLOOR)
}

pub fn l2_normalize_with_floor(v: &[f64], floor: f64) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > floor) {
        return Err(DiffError::DegenerateNorm { norm: n, floor });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(v)?;
    Ok(v.iter().map(|x| x - lse).collect())
}

/// Mean of `-log softmax(row_t)[target_t]` over masked rows of a
/// row-major `targets.len() x vocab` logit block.
pub fn masked_cross_entropy(logits: &[f64], vocab: usize, targets: &[usize], mask: &[bool]) -> Result<f64> {
    if targets.len() != mask.len() || logits.len() != targets.len() * vocab {
        return Err(DiffError::ShapeMismatch(format!(
            "{} logits for {} targets x {vocab}, {} mask flags",
            logits.len(),
            targets.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if t >= vocab {
            return Err(DiffError::ShapeMismatch(format!("target {t} outside vocabulary of {vocab}")));
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        total += log_sum_exp(row)? - row[t];
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
