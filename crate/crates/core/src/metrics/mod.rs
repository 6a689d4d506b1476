//! Saliency, segmentation and matting metrics on single-channel maps in
//! `[0,1]`. Ground truth is binarized at 0.5 wherever a metric needs it.

mod edt;
pub mod report;

pub use edt::{distance_transform, DistanceMap};
pub use report::{ImageScores, MetricReport};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA2_FMAX: f64 = 0.3;
pub const THRESHOLDS: usize = 256;
pub const WF_WINDOW: usize = 7;
pub const WF_SIGMA: f64 = 5.0;
pub const S_ALPHA: f64 = 0.5;
/// Machine epsilon, the guard the reference implementations use.
const EPS: f64 = f64::EPSILON;

/// A row-major `h×w` map of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w || h == 0 || w == 0 {
            return Err(shape_err!("{} values for a {h}x{w} plane", data.len()));
        }
        Ok(Self { h, w, data })
    }

    /// Accepts `[H×W]`, `[1×H×W]` or `[1×1×H×W]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [h, w] => (*h, *w),
            [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => return Err(shape_err!("expected a single-channel map, got {s:?}")),
        };
        Self::new(h, w, t.data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.len() as f64
    }

    pub fn binarize(&self, threshold: f64) -> Vec<bool> {
        self.data.iter().map(|&v| v >= threshold).collect()
    }
}

fn check(pred: &Plane, gt: &Plane) -> Result<()> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(shape_err!("prediction {}x{} vs ground truth {}x{}", pred.h, pred.w, gt.h, gt.w));
    }
    Ok(())
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// F-measure from confusion counts with `β²`, `0/0 → 0`.
pub fn f_beta(tp: f64, fp: f64, fn_: f64, beta2: f64) -> f64 {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    ratio((1.0 + beta2) * p * r, beta2 * p + r)
}

/// Maximum F-measure (β² = 0.3) over thresholds `pred > k/255`, with the
/// full curve.
pub fn f_measure_max(pred: &Plane, gt: &Plane) -> Result<(f64, Vec<f64>)> {
    check(pred, gt)?;
    let g = gt.binarize(0.5);
    let curve: Vec<f64> = (0..THRESHOLDS)
        .map(|k| {
            let t = k as f64 / 255.0;
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (&p, &gv) in pred.data.iter().zip(&g) {
                match (p > t, gv) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            f_beta(tp as f64, fp as f64, fn_ as f64, BETA2_FMAX)
        })
        .collect();
    let max = curve.iter().copied().fold(0.0, f64::max);
    Ok((max, curve))
}

/// Normalized `size×size` Gaussian with standard deviation `sigma`.
fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Weighted F-measure (β = 1): errors are spread with a 7×7, σ = 5 Gaussian
/// (zero padding), background errors take the error of the nearest
/// foreground pixel, and background errors are up-weighted by distance from
/// the object. An all-background ground truth scores 0.
pub fn f_measure_weighted(pred: &Plane, gt: &Plane) -> Result<f64> {
    check(pred, gt)?;
    let g = gt.binarize(0.5);
    if !g.iter().any(|&v| v) {
        return Ok(0.0);
    }
    let (h, w) = (gt.h, gt.w);
    let e: Vec<f64> = pred.data.iter().zip(&g).map(|(&p, &gv)| (p - if gv { 1.0 } else { 0.0 }).abs()).collect();
    let dist = distance_transform(&g, h, w)?;
    let et: Vec<f64> = (0..h * w).map(|i| if g[i] { e[i] } else { e[dist.nearest[i]] }).collect();

    let k = gaussian(WF_WINDOW, WF_SIGMA);
    let r = (WF_WINDOW / 2) as isize;
    let mut ea = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        s += k[((dy + r) * WF_WINDOW as isize + dx + r) as usize] * et[yy as usize * w + xx as usize];
                    }
                }
            }
            ea[y as usize * w + x as usize] = s;
        }
    }

    let decay = 0.5f64.ln() / 5.0;
    let (mut tpw, mut fpw, mut sum_ew_fg, mut n_fg) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..h * w {
        if g[i] {
            let m = if ea[i] < e[i] { ea[i] } else { e[i] };
            sum_ew_fg += m;
            n_fg += 1.0;
        } else {
            let b = 2.0 - (decay * dist.distance[i]).exp();
            fpw += e[i] * b;
        }
    }
    tpw += n_fg - sum_ew_fg;
    let recall = 1.0 - sum_ew_fg / n_fg;
    let precision = tpw / (EPS + tpw + fpw);
    Ok(2.0 * recall * precision / (EPS + recall + precision))
}

pub fn mae(pred: &Plane, gt: &Plane) -> Result<f64> {
    check(pred, gt)?;
    Ok(pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Sample standard deviation; fewer than two values give 0.
fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn s_object(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = values.iter().sum::<f64>() / values.len() as f64;
    2.0 * x / (x * x + 1.0 + sample_std(values) + EPS)
}

/// Region SSIM used by the S-measure (unbiased moments, no window).
fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let x = pred.iter().sum::<f64>() / n as f64;
    let y = gt.iter().sum::<f64>() / n as f64;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        for (p, g) in pred.iter().zip(gt) {
            sx += (p - x) * (p - x);
            sy += (g - y) * (g - y);
            sxy += (p - x) * (g - y);
        }
        let d = (n - 1) as f64;
        (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    }
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// 1-based centroid `(x, y)` of the foreground, rounded half to even; the
/// image centre when empty.
fn centroid(g: &[bool], h: usize, w: usize) -> (usize, usize) {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for (i, _) in g.iter().enumerate().filter(|(_, &v)| v) {
        sy += (i / w) as f64;
        sx += (i % w) as f64;
        n += 1.0;
    }
    if n == 0.0 {
        return ((w as f64 / 2.0).round_ties_even() as usize, (h as f64 / 2.0).round_ties_even() as usize);
    }
    ((sx / n).round_ties_even() as usize + 1, (sy / n).round_ties_even() as usize + 1)
}

/// Structure measure `α·S_object + (1−α)·S_region`, α = 0.5.
pub fn s_measure(pred: &Plane, gt: &Plane) -> Result<f64> {
    check(pred, gt)?;
    let g = gt.binarize(0.5);
    let gf: Vec<f64> = g.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let u = gf.iter().sum::<f64>() / gf.len() as f64;
    if u == 0.0 {
        return Ok(1.0 - pred.mean());
    }
    if u == 1.0 {
        return Ok(pred.mean());
    }

    let fg: Vec<f64> = pred.data.iter().zip(&g).filter(|(_, &v)| v).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.data.iter().zip(&g).filter(|(_, &v)| !v).map(|(&p, _)| 1.0 - p).collect();
    let object = u * s_object(&fg) + (1.0 - u) * s_object(&bg);

    let (h, w) = (gt.h, gt.w);
    let (cx, cy) = centroid(&g, h, w);
    let area = (h * w) as f64;
    let quads = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let w1 = (cx * cy) as f64 / area;
    let w2 = (cy * (w - cx)) as f64 / area;
    let w3 = ((h - cy) * cx) as f64 / area;
    let weights = [w1, w2, w3, 1.0 - w1 - w2 - w3];
    let mut region = 0.0;
    for ((y0, y1, x0, x1), wt) in quads.into_iter().zip(weights) {
        let mut p = Vec::new();
        let mut t = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                p.push(pred.data[y * w + x]);
                t.push(gf[y * w + x]);
            }
        }
        region += wt * region_ssim(&p, &t);
    }
    Ok((S_ALPHA * object + (1.0 - S_ALPHA) * region).max(0.0))
}

/// Threshold `k` of the E-measure sweep: the midpoint `(k + 0.5)/256`, so
/// a binary map binarizes to itself at every threshold.
pub fn e_threshold(k: usize) -> f64 {
    (k as f64 + 0.5) / THRESHOLDS as f64
}

/// Enhanced alignment of one binary prediction with binary ground truth,
/// averaged over pixels.
pub fn enhanced_alignment(pred: &[bool], gt: &[bool]) -> f64 {
    let n = gt.len() as f64;
    let fg_gt = gt.iter().filter(|&&v| v).count() as f64;
    let fg_pred = pred.iter().filter(|&&v| v).count() as f64;
    if fg_gt == 0.0 {
        return (n - fg_pred) / n;
    }
    if fg_gt == n {
        return fg_pred / n;
    }
    let (mp, mg) = (fg_pred / n, fg_gt / n);
    let mut counts = [[0.0f64; 2]; 2];
    for (&p, &g) in pred.iter().zip(gt) {
        counts[p as usize][g as usize] += 1.0;
    }
    let mut sum = 0.0;
    for (p, row) in counts.iter().enumerate() {
        for (g, &c) in row.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let a = p as f64 - mp;
            let b = g as f64 - mg;
            let align = 2.0 * a * b / (a * a + b * b);
            sum += c * (align + 1.0).powi(2) / 4.0;
        }
    }
    sum / n
}

/// Mean enhanced-alignment measure over 256 thresholds.
pub fn e_measure(pred: &Plane, gt: &Plane) -> Result<f64> {
    check(pred, gt)?;
    let g = gt.binarize(0.5);
    let total: f64 = (0..THRESHOLDS).map(|k| enhanced_alignment(&pred.binarize(e_threshold(k)), &g)).sum();
    Ok(total / THRESHOLDS as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MattingErrors {
    /// `Σ|Δ| / 1000`
    pub sad_k: f64,
    /// `1000 · mean(Δ²)`
    pub mse_k: f64,
    pub sad_raw: f64,
    pub mse_raw: f64,
}

pub fn matting_errors(pred: &Plane, gt: &Plane) -> Result<MattingErrors> {
    check(pred, gt)?;
    let sad_raw: f64 = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum();
    let mse_raw = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    Ok(MattingErrors { sad_k: sad_raw / 1000.0, mse_k: 1000.0 * mse_raw, sad_raw, mse_raw })
}

/// IoU of `pred ≥ threshold` with the binarized ground truth; two empty
/// masks score 1.
pub fn miou(pred: &Plane, gt: &Plane, threshold: f64) -> Result<f64> {
    check(pred, gt)?;
    let p = pred.binarize(threshold);
    let g = gt.binarize(0.5);
    let inter = p.iter().zip(&g).filter(|(&a, &b)| a && b).count();
    let union = p.iter().zip(&g).filter(|(&a, &b)| a || b).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
