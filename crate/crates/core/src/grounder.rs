//! Latent visual grounder: learnable latent queries read the text condition,
//! then the image, and come out as unit directions plus an attention map.

use diffcore::{Graph, ParamId, ParamStore, Var};
use thiserror::Error;

use crate::model::{add_attn, add_linear, add_norm, AttnIds, GrounderConfig, Init, LinearIds, ModelError, NormIds};

#[derive(Debug, Error, PartialEq)]
pub enum AttentionMapError {
    #[error("no grounder forward has run")]
    NoForwardYet,
    #[error("weights length {len} is not heads*queries*keys = {heads}*{queries}*{keys}")]
    ShapeMismatch { len: usize, heads: usize, queries: usize, keys: usize },
}

#[derive(Debug, Clone)]
pub struct Grounder {
    pub cfg: GrounderConfig,
    pub d: usize,
    z0: ParamId,
    ln_q1: NormIds,
    ln_c: NormIds,
    cond_attn: AttnIds,
    ln_q2: NormIds,
    ln_v: NormIds,
    img_attn: AttnIds,
    ln_f: NormIds,
    ffn1: LinearIds,
    ffn2: LinearIds,
}

/// Mean directions (L x d, unit rows) and the image attention map.
#[derive(Debug, Clone)]
pub struct GrounderOutput {
    pub mu: Var,
    pub attn: Vec<f64>,
}

impl Grounder {
    pub(crate) fn register(
        cfg: GrounderConfig,
        d: usize,
        store: &mut ParamStore,
        init: &mut Init,
    ) -> Result<Self, ModelError> {
        let z0 = store.add("grounder.z0", init.normal(vec![cfg.latents, d], 1.0 / (d as f64).sqrt()))?;
        let ln_q1 = add_norm(store, init, "grounder.ln_q1", d)?;
        let ln_c = add_norm(store, init, "grounder.ln_c", d)?;
        let cond_attn = add_attn(store, init, "grounder.cond_attn", d, 1.0)?;
        let ln_q2 = add_norm(store, init, "grounder.ln_q2", d)?;
        let ln_v = add_norm(store, init, "grounder.ln_v", d)?;
        let img_attn = add_attn(store, init, "grounder.img_attn", d, 1.0)?;
        let ln_f = add_norm(store, init, "grounder.ln_f", d)?;
        let hidden = cfg.ffn_mult * d;
        let ffn1 = add_linear(store, init, "grounder.ffn1", d, hidden, true, 1.0)?;
        let ffn2 = add_linear(store, init, "grounder.ffn2", hidden, d, true, 1.0)?;
        Ok(Self { cfg, d, z0, ln_q1, ln_c, cond_attn, ln_q2, ln_v, img_attn, ln_f, ffn1, ffn2 })
    }

    /// `image` is m x d patch features, `condition` a 1 x d row.
    pub fn ground(&self, g: &mut Graph, image: Var, condition: Var) -> Result<GrounderOutput, ModelError> {
        let d = self.d;
        let (m, vd) = g.dims(image);
        if vd != d || m == 0 {
            return Err(ModelError::ShapeMismatch(format!("image features {m}x{vd}, grounder width {d}")));
        }
        if g.dims(condition) != (1, d) {
            return Err(ModelError::ShapeMismatch(format!("condition {:?}, expected (1, {d})", g.dims(condition))));
        }
        let heads = self.cfg.heads;
        let z = g.param(self.z0);

        let q = norm(g, z, self.ln_q1);
        let c = norm(g, condition, self.ln_c);
        let (a, _) = cross(g, q, c, self.cond_attn, heads);
        let z = g.add(z, a);

        let q = norm(g, z, self.ln_q2);
        let v = norm(g, image, self.ln_v);
        let (a, node) = cross(g, q, v, self.img_attn, heads);
        let z = g.add(z, a);
        let weights = g.attention_weights(node).expect("attention node");
        let attn = attention_map(weights, heads, self.cfg.latents, m).expect("shapes checked above");

        let h = norm(g, z, self.ln_f);
        let w1 = g.param(self.ffn1.w);
        let b1 = self.ffn1.b.map(|b| g.param(b));
        let h = g.linear(h, w1, b1);
        let h = g.gelu(h);
        let w2 = g.param(self.ffn2.w);
        let b2 = self.ffn2.b.map(|b| g.param(b));
        let h = g.linear(h, w2, b2);
        let z = g.add(z, h);
        let mu = g.l2_normalize_rows(z)?;
        Ok(GrounderOutput { mu, attn })
    }
}

fn norm(g: &mut Graph, x: Var, ids: NormIds) -> Var {
    let gm = g.param(ids.g);
    let bt = g.param(ids.b);
    g.layer_norm(x, gm, bt)
}

/// Returns the projected output and the raw attention node.
fn cross(g: &mut Graph, q: Var, kv: Var, ids: AttnIds, heads: usize) -> (Var, Var) {
    let wq = g.param(ids.wq);
    let wk = g.param(ids.wk);
    let wv = g.param(ids.wv);
    let wo = g.param(ids.wo);
    let qp = g.matmul(q, wq);
    let kp = g.matmul(kv, wk);
    let vp = g.matmul(kv, wv);
    let a = g.attention(qp, kp, vp, heads, false);
    (g.matmul(a, wo), a)
}

/// Averages `[head][query][key]` softmax weights into one distribution over keys.
pub fn attention_map(weights: &[f64], heads: usize, queries: usize, keys: usize) -> Result<Vec<f64>, AttentionMapError> {
    if weights.is_empty() {
        return Err(AttentionMapError::NoForwardYet);
    }
    if heads == 0 || queries == 0 || keys == 0 || weights.len() != heads * queries * keys {
        return Err(AttentionMapError::ShapeMismatch { len: weights.len(), heads, queries, keys });
    }
    let mut out = vec![0.0; keys];
    for row in weights.chunks(keys) {
        out.iter_mut().zip(row).for_each(|(o, w)| *o += w);
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}
