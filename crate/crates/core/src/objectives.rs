//! Training losses. Segmentation: BCE + soft IoU + SSIM. Matting:
//! L1 + SSIM + Sobel-gradient + Laplacian-pyramid. Each term is a graph
//! function of a prediction and a constant target of the same shape.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::heads::Task;
use crate::scalar::Scalar;
use crate::tensor::ops::Padding;
use crate::tensor::{Graph, Tensor, Var};

pub const BCE_CLAMP: f64 = 1e-7;
pub const IOU_EPS: f64 = 1e-6;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Keeps the Sobel magnitude differentiable at zero gradient.
pub const GRAD_EPS: f64 = 1e-6;
pub const LAPLACIAN_LEVELS: usize = 3;

fn same_shape<T: Scalar>(g: &Graph<T>, p: Var, t: Var) -> Result<()> {
    if g.shape(p) != g.shape(t) {
        return Err(shape_err!("prediction {:?} vs target {:?}", g.shape(p), g.shape(t)));
    }
    Ok(())
}

/// `1 − x`
fn complement<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let n = g.scale(x, -T::one())?;
    g.add_scalar(n, T::one())
}

/// Mean binary cross-entropy with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce<T: Scalar>(g: &mut Graph<T>, p: Var, t: Var) -> Result<Var> {
    same_shape(g, p, t)?;
    let eps = T::lit(BCE_CLAMP);
    let pc = g.clamp(p, eps, T::one() - eps)?;
    let lp = g.ln(pc)?;
    let q = complement(g, pc)?;
    let lq = g.ln(q)?;
    let tq = complement(g, t)?;
    let a = g.mul(t, lp)?;
    let b = g.mul(tq, lq)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    g.scale(m, -T::one())
}

/// `1 − (Σpt + ε)/(Σp + Σt − Σpt + ε)`
pub fn soft_iou<T: Scalar>(g: &mut Graph<T>, p: Var, t: Var) -> Result<Var> {
    same_shape(g, p, t)?;
    let eps = T::lit(IOU_EPS);
    let pt = g.mul(p, t)?;
    let inter = g.sum(pt)?;
    let sp = g.sum(p)?;
    let st = g.sum(t)?;
    let union = g.add(sp, st)?;
    let union = g.sub(union, inter)?;
    let num = g.add_scalar(inter, eps)?;
    let den = g.add_scalar(union, eps)?;
    let r = g.div(num, den)?;
    complement(g, r)
}

/// Normalized 7×7 Gaussian window with σ = 1.5.
pub fn gaussian_window<T: Scalar>(size: usize, sigma: f64) -> Result<Tensor<T>> {
    let c = (size as f64 - 1.0) / 2.0;
    let g1: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / s).collect();
    Tensor::from_fn(&[size, size], |i| T::lit(g1[i / size] * g1[i % size]))
}

/// `1 − mean SSIM` over valid window positions.
pub fn ssim<T: Scalar>(g: &mut Graph<T>, p: Var, t: Var) -> Result<Var> {
    same_shape(g, p, t)?;
    let (_, _, h, w) = g.value(p).image_dims()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Parameter(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let win = gaussian_window::<T>(SSIM_WINDOW, SSIM_SIGMA)?;
    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let two = T::lit(2.0);
    let mu_p = g.filter2d(p, &win, Padding::Valid)?;
    let mu_t = g.filter2d(t, &win, Padding::Valid)?;
    let pp = g.square(p)?;
    let tt = g.square(t)?;
    let pt = g.mul(p, t)?;
    let e_pp = g.filter2d(pp, &win, Padding::Valid)?;
    let e_tt = g.filter2d(tt, &win, Padding::Valid)?;
    let e_pt = g.filter2d(pt, &win, Padding::Valid)?;
    let mu_pp = g.square(mu_p)?;
    let mu_tt = g.square(mu_t)?;
    let mu_pt = g.mul(mu_p, mu_t)?;
    let var_p = g.sub(e_pp, mu_pp)?;
    let var_t = g.sub(e_tt, mu_tt)?;
    let cov = g.sub(e_pt, mu_pt)?;

    let a = g.scale(mu_pt, two)?;
    let a = g.add_scalar(a, c1)?;
    let b = g.scale(cov, two)?;
    let b = g.add_scalar(b, c2)?;
    let num = g.mul(a, b)?;
    let c = g.add(mu_pp, mu_tt)?;
    let c = g.add_scalar(c, c1)?;
    let d = g.add(var_p, var_t)?;
    let d = g.add_scalar(d, c2)?;
    let den = g.mul(c, d)?;
    let map = g.div(num, den)?;
    let m = g.mean(map)?;
    complement(g, m)
}

/// Sobel kernels (x, y) as cross-correlation weights.
pub fn sobel<T: Scalar>() -> Result<(Tensor<T>, Tensor<T>)> {
    let kx = Tensor::from_f64(&[3, 3], &[-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0])?;
    let ky = Tensor::from_f64(&[3, 3], &[-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0])?;
    Ok((kx, ky))
}

fn sobel_magnitude<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (kx, ky) = sobel::<T>()?;
    let gx = g.filter2d(x, &kx, Padding::Replicate)?;
    let gy = g.filter2d(x, &ky, Padding::Replicate)?;
    let gx2 = g.square(gx)?;
    let gy2 = g.square(gy)?;
    let s = g.add(gx2, gy2)?;
    let s = g.add_scalar(s, T::lit(GRAD_EPS))?;
    g.sqrt(s)
}

/// Mean `|‖∇p‖ − ‖∇t‖|` with Sobel gradients and replicate padding.
pub fn gradient<T: Scalar>(g: &mut Graph<T>, p: Var, t: Var) -> Result<Var> {
    same_shape(g, p, t)?;
    let mp = sobel_magnitude(g, p)?;
    let mt = sobel_magnitude(g, t)?;
    l1(g, mp, mt)
}

/// 5×5 binomial blur kernel `[1,4,6,4,1]ᵀ[1,4,6,4,1] / 256`.
pub fn binomial_kernel<T: Scalar>() -> Result<Tensor<T>> {
    let k = [1.0, 4.0, 6.0, 4.0, 1.0];
    Tensor::from_fn(&[5, 5], |i| T::lit(k[i / 5] * k[i % 5] / 256.0))
}

/// Laplacian pyramid bands, finest first; the last entry is the low-pass
/// residual.
pub fn laplacian_pyramid<T: Scalar>(g: &mut Graph<T>, x: Var, levels: usize) -> Result<Vec<Var>> {
    let (_, _, h, w) = g.value(x).image_dims()?;
    let f = 1usize << levels;
    if levels == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::Parameter(format!("{h}x{w} is not divisible by 2^{levels}")));
    }
    let k = binomial_kernel::<T>()?;
    let mut gauss = vec![x];
    for _ in 1..levels {
        let prev = *gauss.last().expect("non-empty");
        let b = g.filter2d(prev, &k, Padding::Replicate)?;
        gauss.push(g.subsample2(b)?);
    }
    let mut bands = Vec::with_capacity(levels);
    for i in 0..levels - 1 {
        let (_, _, hi, wi) = g.value(gauss[i]).image_dims()?;
        let up = g.bilinear_resize(gauss[i + 1], hi, wi)?;
        bands.push(g.sub(gauss[i], up)?);
    }
    bands.push(gauss[levels - 1]);
    Ok(bands)
}

/// `Σ_i 2^i · mean|Lap_i(p) − Lap_i(t)|`
pub fn laplacian<T: Scalar>(g: &mut Graph<T>, p: Var, t: Var, levels: usize) -> Result<Var> {
    same_shape(g, p, t)?;
    let bp = laplacian_pyramid(g, p, levels)?;
    let bt = laplacian_pyramid(g, t, levels)?;
    let mut total = None;
    for (i, (a, b)) in bp.into_iter().zip(bt).enumerate() {
        let d = l1(g, a, b)?;
        let d = g.scale(d, T::lit((1u64 << i) as f64))?;
        total = Some(match total {
            None => d,
            Some(acc) => g.add(acc, d)?,
        });
    }
    Ok(total.expect("levels >= 1"))
}

/// Mean absolute difference.
pub fn l1<T: Scalar>(g: &mut Graph<T>, p: Var, t: Var) -> Result<Var> {
    same_shape(g, p, t)?;
    let d = g.sub(p, t)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Per-term multipliers; all default to 1 (plain sums).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub bce: f64,
    pub iou: f64,
    pub ssim_seg: f64,
    pub l1: f64,
    pub ssim_mat: f64,
    pub grad: f64,
    pub laplacian: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bce: 1.0, iou: 1.0, ssim_seg: 1.0, l1: 1.0, ssim_mat: 1.0, grad: 1.0, laplacian: 1.0 }
    }
}

/// Recorded loss values of one step; inactive terms are 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub iou: f64,
    pub ssim_seg: f64,
    pub l1: f64,
    pub ssim_mat: f64,
    pub grad: f64,
    pub laplacian: f64,
    pub seg_total: f64,
    pub matting_total: f64,
    pub total: f64,
}

/// Ground truth available for a batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct Targets {
    pub mask: Option<Var>,
    pub alpha: Option<Var>,
}

/// Loss of the active task. Returns the graph scalar to differentiate and
/// the breakdown of its terms.
pub fn composite_loss<T: Scalar>(
    g: &mut Graph<T>,
    task: Task,
    pred: Var,
    targets: Targets,
    weights: &LossWeights,
    levels: usize,
) -> Result<(Var, LossBreakdown)> {
    let mut terms: Vec<(f64, Var)> = Vec::with_capacity(4);
    let mut out = LossBreakdown::default();
    match task {
        Task::Seg => {
            let t = targets.mask.ok_or_else(|| Error::Contract("segmentation step without a mask target".into()))?;
            terms.push((weights.bce, bce(g, pred, t)?));
            terms.push((weights.iou, soft_iou(g, pred, t)?));
            terms.push((weights.ssim_seg, ssim(g, pred, t)?));
        }
        Task::Matte => {
            let t = targets.alpha.ok_or_else(|| Error::Contract("matting step without an alpha target".into()))?;
            terms.push((weights.l1, l1(g, pred, t)?));
            terms.push((weights.ssim_mat, ssim(g, pred, t)?));
            terms.push((weights.grad, gradient(g, pred, t)?));
            terms.push((weights.laplacian, laplacian(g, pred, t, levels)?));
        }
    }
    let mut total = None;
    let mut values = Vec::with_capacity(terms.len());
    for (w, v) in terms {
        let wv = g.scale(v, T::lit(w))?;
        values.push(g.value(wv).item()?.as_f64());
        total = Some(match total {
            None => wv,
            Some(acc) => g.add(acc, wv)?,
        });
    }
    let total = total.expect("at least one term");
    match task {
        Task::Seg => {
            (out.bce, out.iou, out.ssim_seg) = (values[0], values[1], values[2]);
            out.seg_total = values.iter().sum();
        }
        Task::Matte => {
            (out.l1, out.ssim_mat, out.grad, out.laplacian) = (values[0], values[1], values[2], values[3]);
            out.matting_total = values.iter().sum();
        }
    }
    out.total = out.seg_total + out.matting_total;
    Ok((total, out))
}
