//! Model configuration, parameter layout and initialization.

use diffcore::{ParamId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::Vocab;
use crate::grounder::Grounder;
use crate::vlm::Vlm;

pub const VLM_PREFIX: &str = "vlm.";
pub const GROUNDER_PREFIX: &str = "grounder.";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image is {got}x{got} cells, model expects {want}x{want}")]
    SizeMismatch { got: usize, want: usize },
    #[error("injection at {start}..{end} outside a {len}-token sequence")]
    PositionOutOfRange { start: usize, end: usize, len: usize },
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    TooLong { len: usize, max: usize },
    #[error("no tokens left after removing padding")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
}

/// Decoder and vision-encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub grid_size: usize,
    pub patch: usize,
    pub max_seq: usize,
    /// Cross-attention from text to image features in every block.
    pub image_cross_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 4,
            heads: 4,
            ffn_mult: 4,
            grid_size: crate::synth::DEFAULT_GRID,
            patch: crate::synth::DEFAULT_PATCH,
            max_seq: 512,
            image_cross_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn patches(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(ModelError::Config(format!("d={} not divisible by heads={}", self.d, self.heads)));
        }
        if self.layers == 0 || self.max_seq == 0 || self.ffn_mult == 0 {
            return Err(ModelError::Config("layers, max_seq and ffn_mult must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrounderConfig {
    pub latents: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for GrounderConfig {
    fn default() -> Self {
        Self { latents: 32, heads: 4, ffn_mult: 4 }
    }
}

impl GrounderConfig {
    pub fn validate(&self, d: usize) -> Result<(), ModelError> {
        if self.latents == 0 || self.heads == 0 || d % self.heads != 0 || self.ffn_mult == 0 {
            return Err(ModelError::Config(format!(
                "grounder needs latents>0 and heads dividing d={d} (latents={}, heads={})",
                self.latents, self.heads
            )));
        }
        Ok(())
    }
}

/// Vocabulary plus the parameter handles of both policies.
#[derive(Debug, Clone)]
pub struct DlrModel {
    pub vocab: Vocab,
    pub vlm: Vlm,
    pub grounder: Grounder,
}

impl DlrModel {
    /// Registers freshly initialized parameters into an empty store.
    pub fn init(cfg: &ModelConfig, gcfg: &GrounderConfig, seed: u64) -> Result<(Self, ParamStore), ModelError> {
        cfg.validate()?;
        gcfg.validate(cfg.d)?;
        let vocab = Vocab::new(gcfg.latents);
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let vlm = Vlm::register(cfg.clone(), vocab.len(), &mut store, &mut init)?;
        let grounder = Grounder::register(gcfg.clone(), cfg.d, &mut store, &mut init)?;
        Ok((Self { vocab, vlm, grounder }, store))
    }

    /// Looks up every parameter by name in a loaded store.
    pub fn bind(cfg: &ModelConfig, gcfg: &GrounderConfig, store: &ParamStore) -> Result<Self, ModelError> {
        cfg.validate()?;
        gcfg.validate(cfg.d)?;
        let (fresh, fresh_store) = Self::init(cfg, gcfg, 0)?;
        for p in fresh_store.iter() {
            let id = store.id(&p.name)?;
            if store.value(id).shape() != p.value.shape() {
                return Err(ModelError::ShapeMismatch(format!(
                    "{}: checkpoint {:?}, config {:?}",
                    p.name,
                    store.value(id).shape(),
                    p.value.shape()
                )));
            }
            if id != fresh_store.id(&p.name)? {
                return Err(ModelError::ShapeMismatch(format!("{} stored out of order", p.name)));
            }
        }
        if store.len() != fresh_store.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "checkpoint has {} parameters, config expects {}",
                store.len(),
                fresh_store.len()
            )));
        }
        Ok(fresh)
    }

    pub fn vlm_params(store: &ParamStore) -> Vec<ParamId> {
        store.ids().filter(|&i| store.get(i).name.starts_with(VLM_PREFIX)).collect()
    }

    pub fn grounder_params(store: &ParamStore) -> Vec<ParamId> {
        store.ids().filter(|&i| store.get(i).name.starts_with(GROUNDER_PREFIX)).collect()
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).unwrap();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).unwrap()
    }

    pub fn fill(&mut self, shape: Vec<usize>, v: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![v; n]).unwrap()
    }
}

/// Parameter handles of a bias-free or biased linear map.
#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

pub(crate) fn add_linear(
    store: &mut ParamStore,
    init: &mut Init,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    gain: f64,
) -> Result<LinearIds, ModelError> {
    let w = store.add(format!("{name}.w"), init.normal(vec![fan_in, fan_out], gain / (fan_in as f64).sqrt()))?;
    let b = if bias { Some(store.add(format!("{name}.b"), init.fill(vec![1, fan_out], 0.0))?) } else { None };
    Ok(LinearIds { w, b })
}

pub(crate) fn add_norm(store: &mut ParamStore, init: &mut Init, name: &str, d: usize) -> Result<NormIds, ModelError> {
    Ok(NormIds {
        g: store.add(format!("{name}.g"), init.fill(vec![1, d], 1.0))?,
        b: store.add(format!("{name}.b"), init.fill(vec![1, d], 0.0))?,
    })
}

pub(crate) fn add_attn(
    store: &mut ParamStore,
    init: &mut Init,
    name: &str,
    d: usize,
    out_gain: f64,
) -> Result<AttnIds, ModelError> {
    Ok(AttnIds {
        wq: add_linear(store, init, &format!("{name}.wq"), d, d, false, 1.0)?.w,
        wk: add_linear(store, init, &format!("{name}.wk"), d, d, false, 1.0)?.w,
        wv: add_linear(store, init, &format!("{name}.wv"), d, d, false, 1.0)?.w,
        wo: add_linear(store, init, &format!("{name}.wo"), d, d, false, out_gain)?.w,
    })
}
