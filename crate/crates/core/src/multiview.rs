//! Multi-view localization encoding: the image is split into four quadrant
//! views, each view is upsampled back to full size and run through the frozen
//! encoder, and each view's features attend to the matching quadrant of a
//! multi-scale pooled copy of the global features.

use crate::backbone::{self, EncoderConfig};
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, Attended};
use crate::params::{Ctx, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::ops::{avg_pool2d, bilinear_resize, crop2d, select, stack};
use crate::tensor::{Tensor, Var};

pub const VIEW_COUNT: usize = 4;

/// Quadrant order used throughout: top-left, top-right, bottom-left, bottom-right.
pub fn quadrant_origin(m: usize, h: usize, w: usize) -> (usize, usize) {
    ((m / 2) * h, (m % 2) * w)
}

/// The full image plus its four quadrant views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet<T: Scalar = f64> {
    /// `[B×3×H×W]`
    pub global: Tensor<T>,
    /// Four `[B×3×H/2×W/2]` views in TL, TR, BL, BR order.
    pub locals: [Tensor<T>; VIEW_COUNT],
}

/// Encoded views stacked as `[B×4×C×H/16×W/16]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeatures<T: Scalar = f64> {
    pub stacked: Tensor<T>,
}

impl<T: Scalar> LocalFeatures<T> {
    /// `[4×C×h×w]` for one batch entry.
    pub fn sample(&self, n: usize) -> Result<Tensor<T>> {
        select(&self.stacked, n)
    }
}

/// Multi-scale pooled global context and its quadrant partition.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledContext<T: Scalar = f64> {
    /// `[B×C×h×w]`, same grid as the global features.
    pub pooled: Tensor<T>,
    /// Four `[B×C×h/2×w/2]` quadrants in TL, TR, BL, BR order.
    pub quadrants: [Tensor<T>; VIEW_COUNT],
    /// Receptive fields that were actually applied.
    pub receptive_fields: Vec<usize>,
}

fn as_batch<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = t.image_dims()?;
    t.reshape(&[b, c, h, w])
}

/// Splits `[3×H×W]` or `[B×3×H×W]` into quadrant views. `H` and `W` must be
/// divisible by 32 so each upsampled view encodes on the stride-16 grid.
pub fn crop_views<T: Scalar>(img: &Tensor<T>) -> Result<ViewSet<T>> {
    let global = as_batch(img)?;
    let (_, _, h, w) = global.image_dims()?;
    if h % 32 != 0 || w % 32 != 0 {
        return Err(shape_err!("image {h}x{w} must be divisible by 32 for quadrant views"));
    }
    let (hh, hw) = (h / 2, w / 2);
    let crop = |m: usize| {
        let (y0, x0) = quadrant_origin(m, hh, hw);
        crop2d(&global, y0, x0, hh, hw)
    };
    let locals = [crop(0)?, crop(1)?, crop(2)?, crop(3)?];
    Ok(ViewSet { global, locals })
}

/// Reassembles the quadrant views into the full image.
pub fn stitch<T: Scalar>(views: &[Tensor<T>; VIEW_COUNT]) -> Result<Tensor<T>> {
    let (b, c, h, w) = views[0].image_dims()?;
    if views.iter().any(|v| v.image_dims().ok() != Some((b, c, h, w))) {
        return Err(shape_err!("quadrant views differ in shape"));
    }
    let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w])?;
    for (m, v) in views.iter().enumerate() {
        let (y0, x0) = quadrant_origin(m, h, w);
        for plane in 0..b * c {
            for y in 0..h {
                let dst = plane * 4 * h * w + (y0 + y) * 2 * w + x0;
                let src = (plane * h + y) * w;
                out.data_mut()[dst..dst + w].copy_from_slice(&v.data()[src..src + w]);
            }
        }
    }
    Ok(out)
}

/// Upsamples every view to the full image size and encodes it with the
/// shared frozen encoder.
pub fn encode_views<T: Scalar>(store: &ParamStore<T>, cfg: &EncoderConfig, views: &ViewSet<T>) -> Result<LocalFeatures<T>> {
    let (b, _, h, w) = views.global.image_dims()?;
    let mut per_view = Vec::with_capacity(VIEW_COUNT);
    for local in &views.locals {
        let up = bilinear_resize(local, h, w)?;
        per_view.push(backbone::encode_image(store, cfg, &up)?.global);
    }
    let mut samples = Vec::with_capacity(b);
    for n in 0..b {
        let layers: Vec<Tensor<T>> = per_view.iter().map(|f| select(f, n)).collect::<Result<_>>()?;
        samples.push(stack(&layers.iter().collect::<Vec<_>>())?);
    }
    Ok(LocalFeatures { stacked: stack(&samples.iter().collect::<Vec<_>>())? })
}

/// Average-pools the global features at each receptive field, resizes each
/// result back to the feature grid, and averages the scales. Receptive fields
/// larger than the grid are skipped.
pub fn pool_multiscale<T: Scalar>(global: &Tensor<T>, receptive_fields: &[usize]) -> Result<PooledContext<T>> {
    let global = as_batch(global)?;
    let (_, _, h, w) = global.image_dims()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("feature grid {h}x{w} cannot be split into quadrants"));
    }
    let mut used = Vec::new();
    for &rf in receptive_fields {
        if rf == 0 || rf > h.min(w) {
            log::warn!("dropping receptive field {rf} for {h}x{w} feature grid");
        } else {
            used.push(rf);
        }
    }
    if used.is_empty() {
        return Err(Error::Parameter(format!("no receptive field in {receptive_fields:?} fits a {h}x{w} grid")));
    }
    let maps: Vec<Tensor<T>> = used
        .iter()
        .map(|&rf| bilinear_resize(&avg_pool2d(&global, rf)?, h, w))
        .collect::<Result<_>>()?;
    // mean taken relative to the first scale so equal maps average exactly
    let n = T::from_usize_exact(maps.len());
    let mut pooled = maps[0].clone();
    for (i, v) in pooled.data_mut().iter_mut().enumerate() {
        let base = *v;
        let dev: T = maps[1..].iter().map(|m| m.data()[i] - base).sum();
        *v = base + dev / n;
    }
    let (hh, hw) = (h / 2, w / 2);
    let quad = |m: usize| {
        let (y0, x0) = quadrant_origin(m, hh, hw);
        crop2d(&pooled, y0, x0, hh, hw)
    };
    let quadrants = [quad(0)?, quad(1)?, quad(2)?, quad(3)?];
    Ok(PooledContext { pooled, quadrants, receptive_fields: used })
}

pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init<'_>, dim: usize) -> Result<()> {
    for m in 0..VIEW_COUNT {
        nn::init_attention(store, init, &format!("mvle.patch{m}"), dim)?;
    }
    Ok(())
}

/// Localized features of one batch entry.
#[derive(Clone, Debug)]
pub struct Localized {
    /// Four `[C×h×w]` maps, one per view.
    pub maps: [Var; VIEW_COUNT],
    /// Attention of each view, per head `[h·w × h·w/4]`.
    pub attention: [Attended; VIEW_COUNT],
}

/// Cross-attention of each view's features (queries) to its quadrant of the
/// pooled context (keys and values), with per-view projections and a
/// residual connection onto the view features.
///
/// `local: [4×C×h×w]`, `quadrants: 4 × [C×h/2×w/2]` for the same sample.
pub fn localize<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    local: &Tensor<T>,
    quadrants: &[Tensor<T>; VIEW_COUNT],
    heads: usize,
) -> Result<Localized> {
    let [views, c, h, w] = local.shape()[..] else {
        return Err(shape_err!("local features must be [4,C,h,w], got {:?}", local.shape()));
    };
    if views != VIEW_COUNT {
        return Err(shape_err!("expected {VIEW_COUNT} views, got {views}"));
    }
    let mut maps = Vec::with_capacity(VIEW_COUNT);
    let mut attention = Vec::with_capacity(VIEW_COUNT);
    for (m, quadrant) in quadrants.iter().enumerate() {
        let q = if quadrant.rank() == 4 { select(quadrant, 0)? } else { quadrant.clone() };
        if q.shape()[0] != c {
            return Err(shape_err!("quadrant has {} channels, views have {c}", q.shape()[0]));
        }
        let lm = cx.g.constant(select(local, m)?);
        let queries = nn::map_to_tokens(&mut cx.g, lm)?;
        let qm = cx.g.constant(q);
        let kv = nn::map_to_tokens(&mut cx.g, qm)?;
        let att = nn::attention(cx, queries, kv, kv, heads, &format!("mvle.patch{m}"))?;
        let updated = cx.g.add(queries, att.output)?;
        maps.push(nn::tokens_to_map(&mut cx.g, updated, h, w)?);
        attention.push(att);
    }
    let maps: [Var; VIEW_COUNT] = maps.try_into().expect("four views");
    let attention: [Attended; VIEW_COUNT] = attention.try_into().expect("four views");
    Ok(Localized { maps, attention })
}
