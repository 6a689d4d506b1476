//! Frozen stand-in for the pretrained promptable-segmentation backbone:
//! a stride-16 patch-embedding transformer image encoder, a prompt encoder
//! for points / boxes / coarse masks, and the two-way decoder layers.
//!
//! Weights are random at construction and never updated afterwards.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, LN_EPS};
use crate::params::{Ctx, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

pub const PATCH_STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// 1-based index of the block whose output is tapped as early features.
    pub early_block: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { embed_dim: 32, depth: 2, heads: 4, early_block: 1 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return Err(Error::Config(format!("embed_dim {} must be divisible by 4", self.embed_dim)));
        }
        if self.early_block == 0 || self.early_block > self.depth {
            return Err(Error::Config(format!("early_block {} outside 1..={}", self.early_block, self.depth)));
        }
        Ok(())
    }
}

/// Global and early encoder features, both `[B×C×H/16×W/16]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneFeatures<T: Scalar = f64> {
    pub global: Tensor<T>,
    pub early: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Fg,
    Bg,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxPrompt {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// User interaction in pixel coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptSet<T: Scalar = f64> {
    pub points: Vec<Point>,
    pub bbox: Option<BoxPrompt>,
    /// `[1×H×W]` soft mask.
    pub coarse_mask: Option<Tensor<T>>,
}

impl<T: Scalar> PromptSet<T> {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.bbox.is_none() && self.coarse_mask.is_none()
    }

    /// Number of sparse tokens this prompt encodes to.
    pub fn token_count(&self) -> usize {
        self.points.len() + if self.bbox.is_some() { 2 } else { 0 }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Contract("empty prompt set".into()));
        }
        let (xmax, ymax) = ((width - 1) as f64, (height - 1) as f64);
        let inside = |x: f64, y: f64| x.is_finite() && y.is_finite() && (0.0..=xmax).contains(&x) && (0.0..=ymax).contains(&y);
        for p in &self.points {
            if !inside(p.x, p.y) {
                return Err(Error::Validation(format!("point ({}, {}) outside {width}x{height}", p.x, p.y)));
            }
        }
        if let Some(b) = self.bbox {
            if !inside(b.x0, b.y0) || !inside(b.x1, b.y1) {
                return Err(Error::Validation(format!("box {b:?} outside {width}x{height}")));
            }
            if !(b.x0 < b.x1 && b.y0 < b.y1) {
                return Err(Error::Validation(format!("box {b:?} is not ordered")));
            }
        }
        if let Some(m) = &self.coarse_mask {
            if m.shape() != [1, height, width] {
                return Err(Error::Validation(format!("coarse mask {:?} for {height}x{width} image", m.shape())));
            }
        }
        Ok(())
    }
}

/// Encoded prompt: sparse tokens (absent when only a mask was given) and the
/// dense addend for the image features.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding<T: Scalar = f64> {
    pub tokens: Option<Tensor<T>>,
    /// `[C×H/16×W/16]`, exactly zero without a coarse mask.
    pub dense: Tensor<T>,
}

impl<T: Scalar> PromptEmbedding<T> {
    pub fn token_count(&self) -> usize {
        self.tokens.as_ref().map_or(0, |t| t.shape()[0])
    }
}

pub fn feature_grid(height: usize, width: usize) -> Result<(usize, usize)> {
    if height == 0 || width == 0 || !height.is_multiple_of(PATCH_STRIDE) || !width.is_multiple_of(PATCH_STRIDE) {
        return Err(shape_err!("image {height}x{width} not divisible by {PATCH_STRIDE}"));
    }
    Ok((height / PATCH_STRIDE, width / PATCH_STRIDE))
}

pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init<'_>, cfg: &EncoderConfig, decoder_rounds: usize) -> Result<()> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let patch_len = 3 * PATCH_STRIDE * PATCH_STRIDE;
    nn::init_linear(store, init, "backbone.encoder.patch", patch_len, d, 1.0)?;
    store.insert("backbone.encoder.pe_gaussian", init.normal(&[2, d / 2], 1.0)?)?;
    for b in 0..cfg.depth {
        nn::init_attention(store, init, &format!("backbone.encoder.block{b}.attn"), d)?;
        nn::init_mlp(store, init, &format!("backbone.encoder.block{b}.mlp"), (d, 2 * d, d))?;
    }
    store.insert("backbone.prompt.pe_gaussian", init.normal(&[2, d / 2], 1.0)?)?;
    for name in ["point_fg", "point_bg", "box_tl", "box_br"] {
        store.insert(&format!("backbone.prompt.{name}"), init.normal(&[1, d], 0.5)?)?;
    }
    nn::init_linear(store, init, "backbone.prompt.mask_embed", PATCH_STRIDE * PATCH_STRIDE, d, 1.0)?;
    for r in 1..=decoder_rounds {
        let p = format!("backbone.decoder.round{r}");
        nn::init_attention(store, init, &format!("{p}.self_attn"), d)?;
        nn::init_attention(store, init, &format!("{p}.cross_t2i"), d)?;
        nn::init_mlp(store, init, &format!("{p}.mlp"), (d, 2 * d, d))?;
        nn::init_attention(store, init, &format!("{p}.cross_i2t"), d)?;
    }
    Ok(())
}

/// Random-Fourier sinusoidal encoding of normalized `(x, y) ∈ [0,1]²`
/// coordinates: `[sin(2π·c·G), cos(2π·c·G)]` with `c = 2·xy − 1`.
pub fn fourier_encode<T: Scalar>(coords: &[(f64, f64)], gaussian: &Tensor<T>) -> Result<Tensor<T>> {
    let half = gaussian.shape()[1];
    let g = gaussian.data();
    let mut out = Vec::with_capacity(coords.len() * 2 * half);
    for &(x, y) in coords {
        let (cx, cy) = (2.0 * x - 1.0, 2.0 * y - 1.0);
        let phases: Vec<f64> = (0..half).map(|j| 2.0 * PI * (cx * g[j].as_f64() + cy * g[half + j].as_f64())).collect();
        out.extend(phases.iter().map(|p| T::lit(p.sin())));
        out.extend(phases.iter().map(|p| T::lit(p.cos())));
    }
    Tensor::new(vec![coords.len(), 2 * half], out)
}

/// Positional encoding of every cell centre of an `h×w` grid, `[h·w × C]`.
pub fn grid_encoding<T: Scalar>(h: usize, w: usize, gaussian: &Tensor<T>) -> Result<Tensor<T>> {
    let coords: Vec<(f64, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64)))
        .collect();
    fourier_encode(&coords, gaussian)
}

/// Rows of non-overlapping `p×p` patches of a `[C×H×W]` image, each row
/// ordered `(c, y, x)`.
fn patchify<T: Scalar>(img: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let [c, h, w] = img.shape()[..] else {
        return Err(shape_err!("patchify expects [C,H,W], got {:?}", img.shape()));
    };
    let (gh, gw) = (h / p, w / p);
    let src = img.data();
    let mut out = Vec::with_capacity(c * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..p {
                    let s = ch * h * w + (py * p + y) * w + px * p;
                    out.extend_from_slice(&src[s..s + p]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, c * p * p], out)
}

/// Encodes `[B×3×H×W]` images at stride 16. Runs on an inference graph, so
/// no gradient can reach the encoder weights.
pub fn encode_image<T: Scalar>(store: &ParamStore<T>, cfg: &EncoderConfig, images: &Tensor<T>) -> Result<BackboneFeatures<T>> {
    let (b, c, h, w) = images.image_dims()?;
    if c != 3 {
        return Err(shape_err!("encoder expects 3 channels, got {c}"));
    }
    let (gh, gw) = feature_grid(h, w)?;
    let pe = grid_encoding(gh, gw, store.get("backbone.encoder.pe_gaussian")?)?;
    let mut globals = Vec::with_capacity(b);
    let mut earlies = Vec::with_capacity(b);
    for n in 0..b {
        let img = if images.rank() == 3 { images.clone() } else { crate::tensor::ops::select(images, n)? };
        let mut cx = Ctx::inference(store);
        let patches = cx.g.constant(patchify(&img, PATCH_STRIDE)?);
        let x = nn::linear(&mut cx, patches, "backbone.encoder.patch")?;
        let pos = cx.g.constant(pe.clone());
        let mut x = cx.g.add(x, pos)?;
        let mut early = None;
        for blk in 0..cfg.depth {
            let p = format!("backbone.encoder.block{blk}");
            let ln = cx.g.layer_norm(x, T::lit(LN_EPS))?;
            let a = nn::attention(&mut cx, ln, ln, ln, cfg.heads, &format!("{p}.attn"))?;
            x = cx.g.add(x, a.output)?;
            let ln = cx.g.layer_norm(x, T::lit(LN_EPS))?;
            let m = nn::mlp(&mut cx, ln, &format!("{p}.mlp"))?;
            x = cx.g.add(x, m)?;
            if blk + 1 == cfg.early_block {
                early = Some(x);
            }
        }
        let early = early.expect("early_block validated");
        let gmap = nn::tokens_to_map(&mut cx.g, x, gh, gw)?;
        let emap = nn::tokens_to_map(&mut cx.g, early, gh, gw)?;
        globals.push(cx.g.value(gmap).clone());
        earlies.push(cx.g.value(emap).clone());
    }
    let stack = |v: &[Tensor<T>]| crate::tensor::ops::stack(&v.iter().collect::<Vec<_>>());
    Ok(BackboneFeatures { global: stack(&globals)?, early: stack(&earlies)? })
}

/// Encodes prompts for an `height×width` image.
pub fn encode_prompts<T: Scalar>(
    store: &ParamStore<T>,
    prompts: &PromptSet<T>,
    height: usize,
    width: usize,
) -> Result<PromptEmbedding<T>> {
    prompts.validate(height, width)?;
    let (gh, gw) = feature_grid(height, width)?;
    let gaussian = store.get("backbone.prompt.pe_gaussian")?;
    let d = gaussian.shape()[1] * 2;
    let norm = |x: f64, y: f64| ((x + 0.5) / width as f64, (y + 0.5) / height as f64);

    let mut coords = Vec::new();
    let mut labels: Vec<&Tensor<T>> = Vec::new();
    for p in &prompts.points {
        coords.push(norm(p.x, p.y));
        labels.push(store.get(match p.label {
            PointLabel::Fg => "backbone.prompt.point_fg",
            PointLabel::Bg => "backbone.prompt.point_bg",
        })?);
    }
    if let Some(b) = prompts.bbox {
        coords.push(norm(b.x0, b.y0));
        labels.push(store.get("backbone.prompt.box_tl")?);
        coords.push(norm(b.x1, b.y1));
        labels.push(store.get("backbone.prompt.box_br")?);
    }
    let tokens = if coords.is_empty() {
        None
    } else {
        let mut pe = fourier_encode(&coords, gaussian)?;
        for (row, label) in pe.data_mut().chunks_mut(d).zip(&labels) {
            for (v, &l) in row.iter_mut().zip(label.data()) {
                *v += l;
            }
        }
        Some(pe)
    };

    let dense = match &prompts.coarse_mask {
        None => Tensor::zeros(&[d, gh, gw])?,
        Some(mask) => {
            let mut cx = Ctx::inference(store);
            let patches = cx.g.constant(patchify(mask, PATCH_STRIDE)?);
            let e = nn::linear(&mut cx, patches, "backbone.prompt.mask_embed")?;
            let m = nn::tokens_to_map(&mut cx.g, e, gh, gw)?;
            cx.g.value(m).clone()
        }
    };
    Ok(PromptEmbedding { tokens, dense })
}

/// One frozen two-way decoder layer:
/// token self-attention → token→image cross-attention → token MLP →
/// image→token cross-attention, each pre-normalized and residual.
///
/// `tokens: [T×D]`, `feats: [S×D]`, `image_pe: [S×D]`.
pub fn decoder_layer<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    round: usize,
    heads: usize,
    tokens: Var,
    feats: Var,
    image_pe: Var,
) -> Result<(Var, Var)> {
    let dt = cx.g.value(tokens).matrix_dims()?.1;
    let dc = cx.g.value(feats).matrix_dims()?.1;
    if dt != dc {
        return Err(shape_err!("token width {dt} differs from feature width {dc}"));
    }
    let p = format!("backbone.decoder.round{round}");
    let eps = T::lit(LN_EPS);

    let ln = cx.g.layer_norm(tokens, eps)?;
    let a = nn::attention(cx, ln, ln, ln, heads, &format!("{p}.self_attn"))?;
    let t = cx.g.add(tokens, a.output)?;

    let q = cx.g.layer_norm(t, eps)?;
    let f = cx.g.layer_norm(feats, eps)?;
    let fk = cx.g.add(f, image_pe)?;
    let a = nn::attention(cx, q, fk, f, heads, &format!("{p}.cross_t2i"))?;
    let t = cx.g.add(t, a.output)?;

    let ln = cx.g.layer_norm(t, eps)?;
    let m = nn::mlp(cx, ln, &format!("{p}.mlp"))?;
    let t = cx.g.add(t, m)?;

    let tk = cx.g.layer_norm(t, eps)?;
    let fq = cx.g.add(f, image_pe)?;
    let a = nn::attention(cx, fq, tk, tk, heads, &format!("{p}.cross_i2t"))?;
    let feats_out = cx.g.add(feats, a.output)?;
    Ok((t, feats_out))
}
