//! Deterministic synthetic scenes: feathered superellipse alphas over
//! low-frequency textured foreground and background, composited as
//! `I = αF + (1−α)B`, plus prompt sampling from the resulting mask.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BoxPrompt, Point, PointLabel, PromptSet};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::{avg_pool2d, bilinear_resize};
use crate::tensor::Tensor;

/// Box edges move by at most this fraction of the box side.
pub const BOX_JITTER: f64 = 0.1;
/// Downsampling factor of the coarse-mask prompt.
pub const COARSE_FACTOR: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample<T: Scalar = f64> {
    /// `[3×H×W]`
    pub image: Tensor<T>,
    /// `[1×H×W]`
    pub alpha: Tensor<T>,
    /// `[1×H×W]`, `alpha ≥ 0.5`
    pub mask: Tensor<T>,
    pub fg: Tensor<T>,
    pub bg: Tensor<T>,
    pub seed: u64,
}

/// `α·F + (1−α)·B` with a `[1×H×W]` alpha broadcast over channels.
pub fn composite<T: Scalar>(fg: &Tensor<T>, bg: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w] = fg.shape()[..] else {
        return Err(shape_err!("foreground must be [C,H,W], got {:?}", fg.shape()));
    };
    if bg.shape() != fg.shape() || alpha.shape() != [1, h, w] {
        return Err(shape_err!("fg {:?}, bg {:?}, alpha {:?} disagree", fg.shape(), bg.shape(), alpha.shape()));
    }
    if alpha.data().iter().any(|&a| !(a >= T::zero() && a <= T::one())) {
        return Err(Error::Validation("alpha outside [0,1]".into()));
    }
    let hw = h * w;
    let a = alpha.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let al = a[i % hw];
        al * fg.data()[i] + (T::one() - al) * bg.data()[i]
    })
}

/// Smooth random colour field: base colour, a linear ramp, a low-frequency
/// wave, and a little per-pixel noise, clamped to `[0,1]`.
fn texture<T: Scalar>(rng: &mut ChaCha8Rng, size: usize) -> Result<Tensor<T>> {
    let base: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let ramp: f64 = rng.gen_range(0.1..0.4);
    let freq: f64 = rng.gen_range(0.5..2.0);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let wave: f64 = rng.gen_range(0.0..0.15);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut data = Vec::with_capacity(3 * size * size);
    for &b in &base {
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / size as f64 - 0.5, y as f64 / size as f64 - 0.5);
                let along = u * ca + v * sa;
                let across = -u * sa + v * ca;
                let noise: f64 = rng.gen_range(-0.03..0.03);
                let val = b + ramp * along + wave * (std::f64::consts::TAU * freq * across + phase).sin() + noise;
                data.push(T::lit(val.clamp(0.0, 1.0)));
            }
        }
    }
    Tensor::new(vec![3, size, size], data)
}

/// Alpha of one rotated superellipse with a Gaussian-CDF edge.
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    power: f64,
    feather: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        Self {
            cx: rng.gen_range(0.3..0.7) * size,
            cy: rng.gen_range(0.3..0.7) * size,
            rx: rng.gen_range(0.12..0.3) * size,
            ry: rng.gen_range(0.12..0.3) * size,
            cos: angle.cos(),
            sin: angle.sin(),
            power: rng.gen_range(1.5..4.0),
            feather: rng.gen_range(0.5..2.5),
        }
    }

    fn alpha(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        let r = (u.abs().powf(self.power) + v.abs().powf(self.power)).powf(1.0 / self.power);
        // approximate signed distance in pixels, positive inside
        let d = (1.0 - r) * 0.5 * (self.rx + self.ry);
        0.5 * (1.0 + libm::erf(d / (self.feather * std::f64::consts::SQRT_2)))
    }
}

pub fn generate_sample<T: Scalar>(seed: u64, size: usize) -> Result<SynthSample<T>> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(shape_err!("sample size {size} must be a positive multiple of 32"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<Blob> = (0..rng.gen_range(1..=3)).map(|_| Blob::random(&mut rng, size as f64)).collect();
    let alpha = Tensor::from_fn(&[1, size, size], |i| {
        let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
        // union of soft shapes
        let outside: f64 = blobs.iter().map(|b| 1.0 - b.alpha(x, y)).product();
        T::lit((1.0 - outside).clamp(0.0, 1.0))
    })?;
    let fg = texture(&mut rng, size)?;
    let bg = texture(&mut rng, size)?;
    let image = composite(&fg, &bg, &alpha)?;
    let mask = alpha.map(|a| if a >= T::lit(0.5) { T::one() } else { T::zero() });
    Ok(SynthSample { image, alpha, mask, fg, bg, seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PromptMode {
    Box,
    Points { k: usize },
    NoisyBox,
    CoarseMask,
}

fn foreground<T: Scalar>(mask: &Tensor<T>) -> Result<(usize, usize, Vec<usize>)> {
    let [1, h, w] = mask.shape()[..] else {
        return Err(shape_err!("mask must be [1,H,W], got {:?}", mask.shape()));
    };
    let fg = mask.data().iter().enumerate().filter(|(_, &v)| v >= T::lit(0.5)).map(|(i, _)| i).collect();
    Ok((h, w, fg))
}

/// Tight bounding box of the foreground. A one-pixel-wide side is widened
/// by one pixel (inside the image) so corners stay strictly ordered.
pub fn tight_box<T: Scalar>(mask: &Tensor<T>) -> Result<BoxPrompt> {
    let (h, w, fg) = foreground(mask)?;
    if fg.is_empty() {
        return Err(Error::Contract("box prompt from an empty mask".into()));
    }
    let xs = fg.iter().map(|i| i % w);
    let ys = fg.iter().map(|i| i / w);
    let (mut x0, mut x1) = (xs.clone().min().unwrap_or(0), xs.max().unwrap_or(0));
    let (mut y0, mut y1) = (ys.clone().min().unwrap_or(0), ys.max().unwrap_or(0));
    widen(&mut x0, &mut x1, w);
    widen(&mut y0, &mut y1, h);
    Ok(BoxPrompt { x0: x0 as f64, y0: y0 as f64, x1: x1 as f64, y1: y1 as f64 })
}

fn widen(lo: &mut usize, hi: &mut usize, extent: usize) {
    if lo == hi {
        if *hi + 1 < extent {
            *hi += 1;
        } else if *lo > 0 {
            *lo -= 1;
        }
    }
}

/// Prompts for `mask` (`[1×H×W]`), fully determined by `(mask, seed, mode)`.
pub fn sample_prompts<T: Scalar>(mask: &Tensor<T>, seed: u64, mode: PromptMode) -> Result<PromptSet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, fg) = foreground(mask)?;
    match mode {
        PromptMode::Box => Ok(PromptSet { bbox: Some(tight_box(mask)?), ..Default::default() }),
        PromptMode::NoisyBox => {
            let b = tight_box(mask)?;
            let (bw, bh) = (b.x1 - b.x0, b.y1 - b.y0);
            let mut jitter = |side: f64| rng.gen_range(-BOX_JITTER..=BOX_JITTER) * side;
            let x0 = (b.x0 + jitter(bw)).clamp(0.0, (w - 1) as f64);
            let y0 = (b.y0 + jitter(bh)).clamp(0.0, (h - 1) as f64);
            let x1 = (b.x1 + jitter(bw)).clamp(0.0, (w - 1) as f64);
            let y1 = (b.y1 + jitter(bh)).clamp(0.0, (h - 1) as f64);
            Ok(PromptSet { bbox: Some(BoxPrompt { x0, y0, x1, y1 }), ..Default::default() })
        }
        PromptMode::Points { k } => {
            if fg.is_empty() {
                return Err(Error::Contract("point prompts from an empty mask".into()));
            }
            if k == 0 {
                return Err(Error::Contract("point prompt count must be positive".into()));
            }
            // distinct pixels while possible, then with replacement
            let picks: Vec<usize> = if k <= fg.len() {
                index::sample(&mut rng, fg.len(), k).into_vec()
            } else {
                (0..k).map(|_| rng.gen_range(0..fg.len())).collect()
            };
            let points = picks
                .into_iter()
                .map(|j| Point { x: (fg[j] % w) as f64, y: (fg[j] / w) as f64, label: PointLabel::Fg })
                .collect();
            Ok(PromptSet { points, ..Default::default() })
        }
        PromptMode::CoarseMask => {
            if h < COARSE_FACTOR || w < COARSE_FACTOR {
                return Err(shape_err!("mask {h}x{w} too small for a coarse prompt"));
            }
            let small = avg_pool2d(mask, COARSE_FACTOR)?;
            let coarse = bilinear_resize(&small, h, w)?;
            Ok(PromptSet { coarse_mask: Some(coarse), ..Default::default() })
        }
    }
}
