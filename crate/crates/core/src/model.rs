//! The assembled model: frozen backbone stub, multi-view localization,
//! two decoder+adapter rounds, and both prediction heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, DecodeInput, Decoded, ROUNDS};
use crate::backbone::{self, BackboneFeatures, EncoderConfig, PromptSet};
use crate::error::{shape_err, Result};
use crate::heads::{self, HeadConfig, Task};
use crate::multiview::{self, LocalFeatures, Localized, PooledContext};
use crate::params::{Ctx, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::ops::select;
use crate::tensor::{Tensor, Var};

pub const DEFAULT_RECEPTIVE_FIELDS: [usize; 3] = [4, 8, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub encoder: EncoderConfig,
    pub receptive_fields: Vec<usize>,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Square `image_size` input with heads predicting at `output_resolution`.
    pub fn new(image_size: usize, encoder: EncoderConfig, output_resolution: usize) -> Result<Self> {
        let grid = backbone::feature_grid(image_size, image_size)?.0;
        let head = HeadConfig::for_grid(grid, output_resolution, encoder.embed_dim)?;
        let cfg = Self { image_size, encoder, receptive_fields: DEFAULT_RECEPTIVE_FIELDS.to_vec(), head };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(shape_err!("image_size {} must be a positive multiple of 32", self.image_size));
        }
        self.head.validate(self.image_size / backbone::PATCH_STRIDE)
    }

    pub fn feature_grid(&self) -> usize {
        self.image_size / backbone::PATCH_STRIDE
    }
}

/// Everything the frozen encoder produces for a batch of images. Depends
/// only on the images, so it can be cached across training steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded<T: Scalar = f64> {
    pub backbone: BackboneFeatures<T>,
    pub local: LocalFeatures<T>,
    pub pooled: PooledContext<T>,
}

impl<T: Scalar> Encoded<T> {
    pub fn batch(&self) -> usize {
        self.backbone.global.shape()[0]
    }

    /// Stacks per-sample encodings (each of batch 1) into one batch.
    pub fn concat(parts: &[&Encoded<T>]) -> Result<Self> {
        use crate::tensor::ops::stack;
        let cat = |f: &dyn Fn(&Encoded<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
            let items = parts.iter().map(|p| select(f(p), 0)).collect::<Result<Vec<_>>>()?;
            stack(&items.iter().collect::<Vec<_>>())
        };
        let quad = |m: usize| cat(&|e: &Encoded<T>| &e.pooled.quadrants[m]);
        Ok(Self {
            backbone: BackboneFeatures { global: cat(&|e| &e.backbone.global)?, early: cat(&|e| &e.backbone.early)? },
            local: LocalFeatures { stacked: cat(&|e| &e.local.stacked)? },
            pooled: PooledContext {
                pooled: cat(&|e| &e.pooled.pooled)?,
                quadrants: [quad(0)?, quad(1)?, quad(2)?, quad(3)?],
                receptive_fields: parts.first().map(|p| p.pooled.receptive_fields.clone()).unwrap_or_default(),
            },
        })
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ModelOutput {
    /// `[B×1×R×R]` when requested.
    pub seg: Option<Var>,
    pub matte: Option<Var>,
    pub decoded: Vec<Decoded>,
    pub localized: Vec<Localized>,
    pub prompt_counts: Vec<usize>,
}

impl ModelOutput {
    pub fn prediction(&self, task: Task) -> Option<Var> {
        match task {
            Task::Seg => self.seg,
            Task::Matte => self.matte,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f64> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization of every parameter from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut store = ParamStore::new();
        let d = config.encoder.embed_dim;
        backbone::init_params(&mut store, &mut init, &config.encoder, ROUNDS)?;
        adapter::init_tokens(&mut store, &mut init, d)?;
        multiview::init_params(&mut store, &mut init, d)?;
        adapter::init_params(&mut store, &mut init, d)?;
        heads::init_params(&mut store, &mut init, &config.head, d)?;
        Ok(Self { config, store })
    }

    pub fn from_parts(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, store })
    }

    /// Runs the frozen encoder on the full images and their four views.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Encoded<T>> {
        let (_, c, h, w) = images.image_dims()?;
        let s = self.config.image_size;
        if c != 3 || h != s || w != s {
            return Err(shape_err!("model expects [B,3,{s},{s}] images, got {:?}", images.shape()));
        }
        let backbone = backbone::encode_image(&self.store, &self.config.encoder, images)?;
        let views = multiview::crop_views(images)?;
        let local = multiview::encode_views(&self.store, &self.config.encoder, &views)?;
        let pooled = multiview::pool_multiscale(&backbone.global, &self.config.receptive_fields)?;
        Ok(Encoded { backbone, local, pooled })
    }

    /// Forward pass for `tasks`. With `use_adapter = false` the multi-view
    /// and adapter paths are skipped entirely (plain decoder baseline).
    pub fn forward(
        &self,
        cx: &mut Ctx<'_, T>,
        enc: &Encoded<T>,
        prompts: &[PromptSet<T>],
        tasks: &[Task],
        use_adapter: bool,
    ) -> Result<ModelOutput> {
        let b = enc.batch();
        if prompts.len() != b {
            return Err(shape_err!("{} prompt sets for batch {b}", prompts.len()));
        }
        let s = self.config.image_size;
        let heads = self.config.encoder.heads;
        let mut out = ModelOutput::default();
        let mut feats = Vec::with_capacity(b);
        let mut tokens = Vec::with_capacity(b);
        for (n, prompt) in prompts.iter().enumerate() {
            let pe = backbone::encode_prompts(&self.store, prompt, s, s)?;
            let block = adapter::assemble_tokens(cx, pe.tokens.as_ref())?;
            out.prompt_counts.push(block.prompt_count);
            let mut image = select(&enc.backbone.global, n)?;
            for (v, &d) in image.data_mut().iter_mut().zip(pe.dense.data()) {
                *v += d;
            }
            let fv = cx.g.constant(image);
            let ev = cx.g.constant(select(&enc.backbone.early, n)?);
            let local = if use_adapter {
                let [q0, q1, q2, q3] = &enc.pooled.quadrants;
                let quads = [select(q0, n)?, select(q1, n)?, select(q2, n)?, select(q3, n)?];
                let loc = multiview::localize(cx, &enc.local.sample(n)?, &quads, heads)?;
                let maps = loc.maps;
                out.localized.push(loc);
                Some(maps)
            } else {
                None
            };
            let dec = adapter::decode(cx, heads, DecodeInput { tokens: block, feats: fv, local, early: ev })?;
            feats.push(dec.feats);
            tokens.push(dec.tokens);
            out.decoded.push(dec);
        }
        let stacked = cx.g.stack(&feats)?;
        for &task in tasks {
            let p = heads::predict(cx, &self.config.head, task, &tokens, stacked)?;
            match task {
                Task::Seg => out.seg = Some(p),
                Task::Matte => out.matte = Some(p),
            }
        }
        Ok(out)
    }

    /// Inference convenience: both predictions as tensors.
    pub fn predict(&self, images: &Tensor<T>, prompts: &[PromptSet<T>], use_adapter: bool) -> Result<(Tensor<T>, Tensor<T>)> {
        let enc = self.encode(images)?;
        let mut cx = Ctx::inference(&self.store);
        let out = self.forward(&mut cx, &enc, prompts, &[Task::Seg, Task::Matte], use_adapter)?;
        let seg = cx.g.value(out.seg.expect("requested")).clone();
        let matte = cx.g.value(out.matte.expect("requested")).clone();
        Ok((seg, matte))
    }
}
