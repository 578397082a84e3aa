//! Interleaved decoding: text until `</premise>`, then a latent block from the
//! grounder, then text again, until `<eos>` or a cap.

use diffcore::{Graph, ParamStore};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::format::TokenId;
use crate::model::{DlrModel, ModelError};
use crate::sglp;
use crate::synth::GridImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatentMode {
    /// Inject the mean directions and decode greedily.
    Mean,
    /// Inject spherical samples and decode at temperature 1.
    Sample { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenCaps {
    pub max_steps: usize,
    pub max_tokens: usize,
}

impl Default for GenCaps {
    fn default() -> Self {
        Self { max_steps: 4, max_tokens: 320 }
    }
}

/// What the grounder produced for one step, with positions in the token stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub premise_close: usize,
    pub block_start: usize,
    /// Hidden state at `</premise>`, 1 x d.
    pub condition: Vec<f64>,
    /// L x d mean directions, flattened.
    pub mu: Vec<f64>,
    /// L x d injected vectors, equal to `mu` in mean mode.
    pub z: Vec<f64>,
    pub attn: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
    pub steps: Vec<StepRecord>,
    pub truncated: bool,
    /// m x d patch features the run was conditioned on.
    pub image_features: Vec<f64>,
}

impl Generation {
    /// Positions whose token was chosen by the text policy rather than forced.
    pub fn sampled_positions(&self) -> Vec<usize> {
        let mut forced = vec![false; self.tokens.len()];
        for s in &self.steps {
            let latents = s.z.len() / s.condition.len();
            // <vis_thought>, the block, </vis_thought>
            for f in &mut forced[s.premise_close + 1..=s.block_start + latents] {
                *f = true;
            }
        }
        (self.prompt_len..self.tokens.len()).filter(|&p| !forced[p]).collect()
    }
}

impl DlrModel {
    /// Patch features under inference mode.
    pub fn image_features(&self, store: &ParamStore, image: &GridImage) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::inference(store);
        let v = self.vlm.encode_image(&mut g, image)?;
        Ok(g.value(v).to_vec())
    }

    /// Grounder forward on constant inputs. Returns (mu, attn).
    pub fn ground_values(
        &self,
        store: &ParamStore,
        features: &[f64],
        condition: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let d = self.vlm.cfg.d;
        let m = self.vlm.cfg.patches();
        if features.len() != m * d {
            return Err(ModelError::ShapeMismatch(format!("{} feature values, expected {m}x{d}", features.len())));
        }
        if condition.len() != d {
            return Err(ModelError::ShapeMismatch(format!("condition length {}, expected {d}", condition.len())));
        }
        let mut g = Graph::inference(store);
        let v = g.input(m, d, features.to_vec());
        let c = g.input(1, d, condition.to_vec());
        let out = self.grounder.ground(&mut g, v, c)?;
        Ok((g.value(out.mu).to_vec(), out.attn))
    }

    pub fn generate<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        image: &GridImage,
        question: &[TokenId],
        mode: LatentMode,
        rng: &mut R,
        caps: GenCaps,
    ) -> Result<Generation, ModelError> {
        let vocab = &self.vocab;
        let d = self.vlm.cfg.d;
        let features = self.image_features(store, image)?;
        let mut cache = self.vlm.cache(store, Some(&features));
        let mut tokens = Vec::with_capacity(caps.max_tokens);
        tokens.push(vocab.bos);
        tokens.extend_from_slice(question);
        let prompt_len = tokens.len();
        let limit = caps.max_tokens.min(self.vlm.cfg.max_seq);
        if prompt_len >= limit {
            return Err(ModelError::TooLong { len: prompt_len, max: limit });
        }
        let hidden = cache.push_tokens(&tokens)?;
        let mut last = hidden[hidden.len() - d..].to_vec();
        let mut steps = Vec::new();
        let mut truncated = false;
        loop {
            if tokens.len() >= limit {
                truncated = true;
                break;
            }
            let logits = cache.logits(&last);
            let next = match mode {
                LatentMode::Mean => argmax(&logits),
                LatentMode::Sample { .. } => sample_softmax(&logits, rng),
            };
            tokens.push(next);
            let h = cache.push_tokens(&[next])?;
            last = h;
            if next == vocab.eos {
                break;
            }
            if next != vocab.premise_close {
                continue;
            }
            let latents = vocab.latents();
            if steps.len() == caps.max_steps || tokens.len() + latents + 2 > limit {
                truncated = true;
                break;
            }
            let premise_close = tokens.len() - 1;
            let condition = last.clone();
            let (mu, attn) = self.ground_values(store, &features, &condition)?;
            let z = match mode {
                LatentMode::Mean => mu.clone(),
                LatentMode::Sample { sigma } => {
                    let mut z = Vec::with_capacity(mu.len());
                    for row in mu.chunks(d) {
                        z.extend(sglp::sample(row, sigma, rng).map_err(|e| ModelError::Config(e.to_string()))?);
                    }
                    z
                }
            };
            tokens.push(vocab.vis_open);
            cache.push_tokens(&[vocab.vis_open])?;
            let block_start = tokens.len();
            tokens.extend((0..latents).map(|k| vocab.placeholder_id(k)));
            cache.push_vectors(&z)?;
            tokens.push(vocab.vis_close);
            last = cache.push_tokens(&[vocab.vis_close])?;
            steps.push(StepRecord { premise_close, block_start, condition, mu, z, attn });
        }
        Ok(Generation { tokens, prompt_len, steps, truncated, image_features: features })
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Draws from softmax(logits) at temperature 1.
pub fn sample_softmax<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> usize {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        u -= wi;
        if u < 0.0 {
            return i;
        }
    }
    w.len() - 1
}
