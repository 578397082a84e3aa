//! Tiny vision-language model: patch encoder plus a pre-LN causal decoder
//! that cross-attends to the patch features.
//!
//! The same weights run in two ways. [`Vlm::forward`] records a tape for
//! training, and [`DecoderCache`] decodes incrementally with cached keys and
//! values for generation. Both produce the same numbers up to rounding.

use diffcore::kernels::{gemm, Layout};
use diffcore::{attention_forward, gelu, Graph, ParamId, ParamStore, Var, LN_EPS};

use crate::format::TokenId;
use crate::model::{add_attn, add_linear, add_norm, AttnIds, Init, LinearIds, ModelConfig, ModelError, NormIds};
use crate::synth::GridImage;

#[derive(Debug, Clone)]
struct BlockIds {
    ln1: NormIds,
    attn: AttnIds,
    xattn: Option<(NormIds, AttnIds)>,
    ln3: NormIds,
    ffn1: LinearIds,
    ffn2: LinearIds,
}

#[derive(Debug, Clone)]
pub struct Vlm {
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    patch_proj: LinearIds,
    row_emb: ParamId,
    col_emb: ParamId,
    img_ln: NormIds,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    ln_f: NormIds,
    head: LinearIds,
}

/// A run of consecutive positions whose input embeddings are replaced.
#[derive(Debug, Clone, Copy)]
pub struct Injection {
    pub start: usize,
    /// k x d rows placed at `start..start + k`.
    pub rows: Var,
}

impl Vlm {
    pub(crate) fn register(
        cfg: ModelConfig,
        vocab_size: usize,
        store: &mut ParamStore,
        init: &mut Init,
    ) -> Result<Self, ModelError> {
        let d = cfg.d;
        let g = cfg.grid_size;
        let emb_std = 1.0 / (d as f64).sqrt();
        let out_gain = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let patch_proj = add_linear(store, init, "vlm.patch_proj", cfg.patch_dim(), d, true, 1.0)?;
        let row_emb = store.add("vlm.row_emb", init.normal(vec![g, d], emb_std))?;
        let col_emb = store.add("vlm.col_emb", init.normal(vec![g, d], emb_std))?;
        let img_ln = add_norm(store, init, "vlm.img_ln", d)?;
        let tok_emb = store.add("vlm.tok_emb", init.normal(vec![vocab_size, d], emb_std))?;
        let pos_emb = store.add("vlm.pos_emb", init.normal(vec![cfg.max_seq, d], 0.3 * emb_std))?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("vlm.blocks.{i}");
            let ln1 = add_norm(store, init, &format!("{p}.ln1"), d)?;
            let attn = add_attn(store, init, &format!("{p}.attn"), d, out_gain)?;
            let xattn = if cfg.image_cross_attention {
                Some((
                    add_norm(store, init, &format!("{p}.ln2"), d)?,
                    add_attn(store, init, &format!("{p}.xattn"), d, out_gain)?,
                ))
            } else {
                None
            };
            let ln3 = add_norm(store, init, &format!("{p}.ln3"), d)?;
            let hidden = cfg.ffn_mult * d;
            let ffn1 = add_linear(store, init, &format!("{p}.ffn1"), d, hidden, true, 1.0)?;
            let ffn2 = add_linear(store, init, &format!("{p}.ffn2"), hidden, d, true, out_gain)?;
            blocks.push(BlockIds { ln1, attn, xattn, ln3, ffn1, ffn2 });
        }
        let ln_f = add_norm(store, init, "vlm.ln_f", d)?;
        let head = add_linear(store, init, "vlm.head", d, vocab_size, true, 1.0)?;
        Ok(Self { cfg, vocab_size, patch_proj, row_emb, col_emb, img_ln, tok_emb, pos_emb, blocks, ln_f, head })
    }

    /// Flattened patch pixels scaled to [-0.5, 0.5], one row per patch.
    pub fn patch_inputs(&self, image: &GridImage) -> Result<Vec<f64>, ModelError> {
        if image.size != self.cfg.grid_size {
            return Err(ModelError::SizeMismatch { got: image.size, want: self.cfg.grid_size });
        }
        if image.patch != self.cfg.patch {
            return Err(ModelError::Config(format!(
                "image patch {} but model patch {}",
                image.patch, self.cfg.patch
            )));
        }
        let mut out = Vec::with_capacity(image.patches() * self.cfg.patch_dim());
        for i in 0..image.patches() {
            out.extend(image.patch_pixels(i).iter().map(|&p| p as f64 / 255.0 - 0.5));
        }
        Ok(out)
    }

    /// Patch features V, m x d.
    pub fn encode_image(&self, g: &mut Graph, image: &GridImage) -> Result<Var, ModelError> {
        let m = self.cfg.patches();
        let x = g.input(m, self.cfg.patch_dim(), self.patch_inputs(image)?);
        let w = g.param(self.patch_proj.w);
        let b = self.patch_proj.b.map(|b| g.param(b));
        let h = g.linear(x, w, b);
        let side = self.cfg.grid_size;
        let rows: Vec<usize> = (0..m).map(|i| i / side).collect();
        let cols: Vec<usize> = (0..m).map(|i| i % side).collect();
        let re = g.param(self.row_emb);
        let ce = g.param(self.col_emb);
        let r = g.gather(re, &rows);
        let c = g.gather(ce, &cols);
        let h = g.add(h, r);
        let h = g.add(h, c);
        Ok(norm(g, h, self.img_ln))
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len > self.cfg.max_seq {
            return Err(ModelError::TooLong { len, max: self.cfg.max_seq });
        }
        Ok(())
    }

    /// Final-norm hidden states, T x d. Injected rows replace the token
    /// embedding; the position embedding is still added.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[TokenId],
        injections: &[Injection],
        image: Option<Var>,
    ) -> Result<Var, ModelError> {
        let t = tokens.len();
        if t == 0 {
            return Err(ModelError::EmptyInput);
        }
        self.check_len(t)?;
        let d = self.cfg.d;
        let te = g.param(self.tok_emb);
        let mut x = g.gather(te, tokens);
        for inj in injections {
            let (k, c) = g.dims(inj.rows);
            if c != d {
                return Err(ModelError::ShapeMismatch(format!("injected width {c}, model width {d}")));
            }
            if inj.start + k > t {
                return Err(ModelError::PositionOutOfRange { start: inj.start, end: inj.start + k, len: t });
            }
            let positions: Vec<usize> = (inj.start..inj.start + k).collect();
            x = g.scatter_rows(x, &positions, inj.rows);
        }
        let pe = g.param(self.pos_emb);
        let pe = g.slice_rows(pe, 0, t);
        let mut x = g.add(x, pe);
        let heads = self.cfg.heads;
        for b in &self.blocks {
            let h = norm(g, x, b.ln1);
            let a = self_attn(g, h, h, b.attn, heads, true);
            x = g.add(x, a);
            if let (Some((ln2, xa)), Some(img)) = (b.xattn, image) {
                let h = norm(g, x, ln2);
                let a = self_attn(g, h, img, xa, heads, false);
                x = g.add(x, a);
            }
            let h = norm(g, x, b.ln3);
            let f = ffn(g, h, b.ffn1, b.ffn2);
            x = g.add(x, f);
        }
        Ok(norm(g, x, self.ln_f))
    }

    pub fn logits(&self, g: &mut Graph, hidden: Var) -> Var {
        let w = g.param(self.head.w);
        let b = self.head.b.map(|b| g.param(b));
        g.linear(hidden, w, b)
    }

    /// Hidden state at the last non-pad token of a text-only run.
    pub fn last_valid_hidden(&self, g: &mut Graph, tokens: &[TokenId], pad: TokenId) -> Result<Var, ModelError> {
        let n = tokens.iter().rposition(|&t| t != pad).map(|i| i + 1).ok_or(ModelError::EmptyInput)?;
        let h = self.forward(g, &tokens[..n], &[], None)?;
        Ok(g.slice_rows(h, n - 1, n))
    }

    pub fn cache<'a>(&'a self, store: &'a ParamStore, image_features: Option<&[f64]>) -> DecoderCache<'a> {
        DecoderCache::new(self, store, image_features)
    }
}

fn norm(g: &mut Graph, x: Var, ids: NormIds) -> Var {
    let gm = g.param(ids.g);
    let bt = g.param(ids.b);
    g.layer_norm(x, gm, bt)
}

fn self_attn(g: &mut Graph, x: Var, kv: Var, ids: AttnIds, heads: usize, causal: bool) -> Var {
    let wq = g.param(ids.wq);
    let wk = g.param(ids.wk);
    let wv = g.param(ids.wv);
    let wo = g.param(ids.wo);
    let q = g.matmul(x, wq);
    let k = g.matmul(kv, wk);
    let v = g.matmul(kv, wv);
    let a = g.attention(q, k, v, heads, causal);
    g.matmul(a, wo)
}

fn ffn(g: &mut Graph, x: Var, l1: LinearIds, l2: LinearIds) -> Var {
    let w1 = g.param(l1.w);
    let b1 = l1.b.map(|b| g.param(b));
    let h = g.linear(x, w1, b1);
    let h = g.gelu(h);
    let w2 = g.param(l2.w);
    let b2 = l2.b.map(|b| g.param(b));
    g.linear(h, w2, b2)
}

// ---- tape-free incremental decoding ----

/// `x @ w (+ b)` for row-major x (n x din) and w (din x dout).
pub(crate) fn dense(x: &[f64], n: usize, din: usize, w: &[f64], dout: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; n * dout];
    if let Some(b) = b {
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(b);
        }
    }
    gemm(n, din, dout, x, Layout::n(din), w, Layout::n(dout), &mut out, dout, if b.is_some() { 1.0 } else { 0.0 });
    out
}

pub(crate) fn layer_norm_rows(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            o[j] = (row[j] - mean) * rs * g[j] + b[j];
        }
    }
    out
}

struct LayerCache {
    k: Vec<f64>,
    v: Vec<f64>,
    img_k: Vec<f64>,
    img_v: Vec<f64>,
}

/// Incremental decoder state holding per-layer keys and values.
pub struct DecoderCache<'a> {
    vlm: &'a Vlm,
    store: &'a ParamStore,
    layers: Vec<LayerCache>,
    patches: usize,
    len: usize,
}

impl<'a> DecoderCache<'a> {
    fn new(vlm: &'a Vlm, store: &'a ParamStore, image: Option<&[f64]>) -> Self {
        let d = vlm.cfg.d;
        let patches = image.map_or(0, |v| v.len() / d);
        let layers = vlm
            .blocks
            .iter()
            .map(|b| {
                let (img_k, img_v) = match (b.xattn, image) {
                    (Some((_, xa)), Some(img)) => (
                        dense(img, patches, d, store.value(xa.wk).data(), d, None),
                        dense(img, patches, d, store.value(xa.wv).data(), d, None),
                    ),
                    _ => (Vec::new(), Vec::new()),
                };
                LayerCache { k: Vec::new(), v: Vec::new(), img_k, img_v }
            })
            .collect();
        Self { vlm, store, layers, patches, len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn p(&self, id: ParamId) -> &'a [f64] {
        self.store.value(id).data()
    }

    pub fn push_tokens(&mut self, tokens: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let d = self.vlm.cfg.d;
        let table = self.p(self.vlm.tok_emb);
        let mut x = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= self.vlm.vocab_size {
                return Err(ModelError::ShapeMismatch(format!("token id {t} outside vocab")));
            }
            x.extend_from_slice(&table[t * d..(t + 1) * d]);
        }
        self.push_embeddings(x)
    }

    /// Appends rows given directly as input embeddings (the latent slots).
    pub fn push_vectors(&mut self, rows: &[f64]) -> Result<Vec<f64>, ModelError> {
        if rows.len() % self.vlm.cfg.d != 0 {
            return Err(ModelError::ShapeMismatch("vector rows not a multiple of d".into()));
        }
        self.push_embeddings(rows.to_vec())
    }

    /// Runs new rows through every layer and returns their final-norm hidden states.
    fn push_embeddings(&mut self, mut x: Vec<f64>) -> Result<Vec<f64>, ModelError> {
        let cfg = &self.vlm.cfg;
        let d = cfg.d;
        let n = x.len() / d;
        if n == 0 {
            return Ok(Vec::new());
        }
        self.vlm.check_len(self.len + n)?;
        let pos = self.p(self.vlm.pos_emb);
        for (i, row) in x.chunks_mut(d).enumerate() {
            let p = &pos[(self.len + i) * d..(self.len + i + 1) * d];
            row.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        let heads = cfg.heads;
        for (b, cache) in self.vlm.blocks.iter().zip(self.layers.iter_mut()) {
            let st = self.store;
            let p = |id: ParamId| st.value(id).data();
            let h = layer_norm_rows(&x, d, p(b.ln1.g), p(b.ln1.b));
            let q = dense(&h, n, d, p(b.attn.wq), d, None);
            cache.k.extend(dense(&h, n, d, p(b.attn.wk), d, None));
            cache.v.extend(dense(&h, n, d, p(b.attn.wv), d, None));
            let tk = self.len + n;
            let mut a = vec![0.0; n * d];
            let mut w = vec![0.0; heads * n * tk];
            attention_forward(&q, &cache.k, &cache.v, n, tk, d, heads, true, &mut a, &mut w);
            add_in(&mut x, &dense(&a, n, d, p(b.attn.wo), d, None));
            if let Some((ln2, xa)) = b.xattn {
                if self.patches > 0 {
                    let h = layer_norm_rows(&x, d, p(ln2.g), p(ln2.b));
                    let q = dense(&h, n, d, p(xa.wq), d, None);
                    let mut a = vec![0.0; n * d];
                    let mut w = vec![0.0; heads * n * self.patches];
                    attention_forward(&q, &cache.img_k, &cache.img_v, n, self.patches, d, heads, false, &mut a, &mut w);
                    add_in(&mut x, &dense(&a, n, d, p(xa.wo), d, None));
                }
            }
            let h = layer_norm_rows(&x, d, p(b.ln3.g), p(b.ln3.b));
            let hidden = cfg.ffn_mult * d;
            let mut f = dense(&h, n, d, p(b.ffn1.w), hidden, b.ffn1.b.map(p));
            f.iter_mut().for_each(|v| *v = gelu(*v));
            add_in(&mut x, &dense(&f, n, hidden, p(b.ffn2.w), d, b.ffn2.b.map(p)));
        }
        self.len += n;
        Ok(layer_norm_rows(&x, d, self.p(self.vlm.ln_f.g), self.p(self.vlm.ln_f.b)))
    }

    /// Next-token logits from one final-norm hidden row.
    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let head = self.vlm.head;
        dense(hidden, 1, self.vlm.cfg.d, self.p(head.w), self.vlm.vocab_size, head.b.map(|b| self.p(b)))
    }
}

fn add_in(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}
