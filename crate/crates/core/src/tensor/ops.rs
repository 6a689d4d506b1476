//! Non-recording kernels. Every `*_backward` function here is the exact
//! adjoint of its forward counterpart and is what [`super::Graph`] replays.

use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(shape_err!("matmul inner dims {:?} x {:?}", a.shape(), b.shape()));
    }
    let out = matmul_raw(a.data(), b.data(), m, k, n);
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul")
}

/// `[m×k] · [k×n]`, i-k-j loop order so the inner loop is contiguous.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` without materializing the transpose: `[k×m]ᵀ · [k×n]`.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`: `[m×k] · [n×k]ᵀ`.
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.matrix_dims()?;
    Tensor::new(vec![n, m], transpose_raw(a.data(), m, n))
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `(outer, len, inner)` strides for reducing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, max-subtracted.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(src[idx(j)]));
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)?.ensure_finite("softmax")
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &Tensor<T>,
    grad_out: &[T],
    axis: usize,
) -> Result<Vec<T>> {
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let yv = y.data();
    let mut gx = vec![T::zero(); yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| yv[idx(j)] * grad_out[idx(j)]).sum();
            for j in 0..len {
                gx[idx(j)] = yv[idx(j)] * (grad_out[idx(j)] - dot);
            }
        }
    }
    Ok(gx)
}

/// Source taps for one output coordinate under half-pixel (align-corners
/// false) sampling: `(i0, i1, frac)`.
fn bilinear_taps<T: Scalar>(out_len: usize, in_len: usize) -> Vec<(usize, usize, T)> {
    let scale = T::from_usize_exact(in_len) / T::from_usize_exact(out_len);
    let half = T::lit(0.5);
    (0..out_len)
        .map(|d| {
            let src = ((T::from_usize_exact(d) + half) * scale - half).max(T::zero());
            let i0 = src.floor().to_usize().unwrap_or(0).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - T::from_usize_exact(i0);
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resampling of `[C,H,W]` or `[B,C,H,W]` maps to `out_h × out_w`.
pub fn bilinear_resize<T: Scalar>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("bilinear_resize target {out_h}x{out_w}"));
    }
    let (b, c, h, w) = t.image_dims()?;
    let ys = bilinear_taps::<T>(out_h, h);
    let xs = bilinear_taps::<T>(out_w, w);
    let src = t.data();
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    let mut rows = vec![T::zero(); h * out_w];
    for plane in 0..b * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        // horizontal pass over every source row, then vertical lerp; the
        // lerp form keeps constant inputs exactly constant
        for (row, dst) in p.chunks_exact(w).zip(rows.chunks_exact_mut(out_w)) {
            for (d, &(x0, x1, fx)) in dst.iter_mut().zip(&xs) {
                *d = row[x0] + fx * (row[x1] - row[x0]);
            }
        }
        for &(y0, y1, fy) in &ys {
            let (top, bot) = (&rows[y0 * out_w..(y0 + 1) * out_w], &rows[y1 * out_w..(y1 + 1) * out_w]);
            out.extend(top.iter().zip(bot).map(|(&t, &b)| t + fy * (b - t)));
        }
    }
    let mut shape = t.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Tensor::new(shape, out)?.ensure_finite("bilinear_resize")
}

pub(crate) fn bilinear_resize_backward<T: Scalar>(
    in_shape: &[usize],
    grad_out: &[T],
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let planes: usize = in_shape[..r - 2].iter().product();
    let ys = bilinear_taps::<T>(out_h, h);
    let xs = bilinear_taps::<T>(out_w, w);
    let mut gx = vec![T::zero(); planes * h * w];
    let one = T::one();
    let mut rows = vec![T::zero(); h * out_w];
    for plane in 0..planes {
        let g = &mut gx[plane * h * w..(plane + 1) * h * w];
        let go = &grad_out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        // transpose of the forward: vertical pass into source rows, then horizontal
        rows.fill(T::zero());
        for (d, &(y0, y1, fy)) in go.chunks_exact(out_w).zip(&ys) {
            for (r, &v) in rows[y0 * out_w..(y0 + 1) * out_w].iter_mut().zip(d) {
                *r += v * (one - fy);
            }
            for (r, &v) in rows[y1 * out_w..(y1 + 1) * out_w].iter_mut().zip(d) {
                *r += v * fy;
            }
        }
        for (row, dst) in rows.chunks_exact(out_w).zip(g.chunks_exact_mut(w)) {
            for (&v, &(x0, x1, fx)) in row.iter().zip(&xs) {
                dst[x0] += v * (one - fx);
                dst[x1] += v * fx;
            }
        }
    }
    gx
}

/// Non-overlapping `k×k` window means; trailing rows/cols that do not fill a
/// window are dropped.
pub fn avg_pool2d<T: Scalar>(t: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = t.image_dims()?;
    if k == 0 || k > h.min(w) {
        return Err(Error::Parameter(format!("pool size {k} for {h}x{w} map")));
    }
    let (oh, ow) = (h / k, w / k);
    let norm = T::from_usize_exact(k * k);
    let src = t.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                // shifted by the window's first value: constants pool exactly
                let base = p[oy * k * w + ox * k];
                let mut acc = T::zero();
                for y in oy * k..(oy + 1) * k {
                    for x in ox * k..(ox + 1) * k {
                        acc += p[y * w + x] - base;
                    }
                }
                out.push(base + acc / norm);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out)?.ensure_finite("avg_pool2d")
}

pub(crate) fn avg_pool2d_backward<T: Scalar>(in_shape: &[usize], grad_out: &[T], k: usize) -> Vec<T> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let planes: usize = in_shape[..r - 2].iter().product();
    let (oh, ow) = (h / k, w / k);
    let norm = T::from_usize_exact(k * k);
    let mut gx = vec![T::zero(); planes * h * w];
    for plane in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let d = grad_out[(plane * oh + oy) * ow + ox] / norm;
                for y in oy * k..(oy + 1) * k {
                    for x in ox * k..(ox + 1) * k {
                        gx[plane * h * w + y * w + x] += d;
                    }
                }
            }
        }
    }
    gx
}

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (b, cin, h, w) = x.image_dims()?;
    let (cout, wcin, kh, kw) = match weight.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(shape_err!("conv weight must be [Cout,Cin,k,k], got {:?}", weight.shape())),
    };
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::Parameter(format!("unsupported conv kernel {kh}x{kw}; expected 1 or 3")));
    }
    if wcin != cin {
        return Err(shape_err!("conv input has {cin} channels, weight expects {wcin}"));
    }
    if bias.shape() != [cout] {
        return Err(shape_err!("conv bias {:?} for {cout} output channels", bias.shape()));
    }
    Ok((b, cin, h, w, cout, kh))
}

/// Cross-correlation with zero "same" padding, `k ∈ {1, 3}`, plus per-channel bias.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, cin, h, w, cout, k) = conv_dims(x, weight, bias)?;
    let pad = (k / 2) as isize;
    let (xs, ws) = (x.data(), weight.data());
    let mut out = vec![T::zero(); b * cout * h * w];
    for n in 0..b {
        for co in 0..cout {
            let o = &mut out[(n * cout + co) * h * w..(n * cout + co + 1) * h * w];
            o.fill(bias.data()[co]);
            for ci in 0..cin {
                let plane = &xs[(n * cin + ci) * h * w..(n * cin + ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = ws[((co * cin + ci) * k + ky) * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        let (x_lo, x_hi) = valid_range(w, dx);
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let s0 = (sy as usize * w) as isize + x_lo as isize + dx;
                            let src = &plane[s0 as usize..s0 as usize + (x_hi - x_lo)];
                            for (ov, &sv) in o[y * w + x_lo..y * w + x_hi].iter_mut().zip(src) {
                                *ov += wv * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 3] = cout;
    Tensor::new(shape, out)?.ensure_finite("conv2d")
}

/// Output columns `x` for which `x + dx` lies inside `[0, w)`.
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, cin, h, w) = x.image_dims().expect("validated in forward");
    let (cout, k) = (weight.shape()[0], weight.shape()[2]);
    let pad = (k / 2) as isize;
    let (xs, ws) = (x.data(), weight.data());
    let mut gx = vec![T::zero(); xs.len()];
    let mut gw = vec![T::zero(); ws.len()];
    let mut gb = vec![T::zero(); cout];
    for n in 0..b {
        for co in 0..cout {
            let go = &grad_out[(n * cout + co) * h * w..(n * cout + co + 1) * h * w];
            gb[co] += go.iter().copied().sum();
            for ci in 0..cin {
                let base = (n * cin + ci) * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * cin + ci) * k + ky) * k + kx;
                        let wv = ws[widx];
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        let (x_lo, x_hi) = valid_range(w, dx);
                        let mut acc = T::zero();
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let s0 = (base + sy as usize * w) as isize + x_lo as isize + dx;
                            let span = s0 as usize..s0 as usize + (x_hi - x_lo);
                            let grow = &go[y * w + x_lo..y * w + x_hi];
                            acc += grow.iter().zip(&xs[span.clone()]).fold(T::zero(), |a, (&g, &x)| a + g * x);
                            for (gv, &g) in gx[span].iter_mut().zip(grow) {
                                *gv += g * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Border handling for [`filter2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Out-of-range taps read zero; output keeps the input size.
    Zero,
    /// Out-of-range taps read the nearest edge pixel; output keeps the input size.
    Replicate,
    /// Only fully-covered positions; output shrinks by `k - 1`.
    Valid,
}

fn filter_geometry(h: usize, w: usize, kh: usize, kw: usize, padding: Padding) -> Result<(usize, usize, isize, isize)> {
    match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::Parameter(format!("{kh}x{kw} window larger than {h}x{w} map")));
            }
            Ok((h - kh + 1, w - kw + 1, 0, 0))
        }
        _ => Ok((h, w, (kh / 2) as isize, (kw / 2) as isize)),
    }
}

/// Source plane extended by the padding, `(h + kh − 1) × (w + kw − 1)` for
/// the same-size modes and the plane itself for `Valid`.
fn pad_plane<T: Scalar>(p: &[T], h: usize, w: usize, kh: usize, kw: usize, padding: Padding) -> (Vec<T>, usize) {
    if padding == Padding::Valid {
        return (p.to_vec(), w);
    }
    let (py, px) = ((kh / 2) as isize, (kw / 2) as isize);
    let (ph, pw) = (h + kh - 1, w + kw - 1);
    let mut out = vec![T::zero(); ph * pw];
    for yy in 0..ph {
        let sy = yy as isize - py;
        for xx in 0..pw {
            let sx = xx as isize - px;
            out[yy * pw + xx] = match padding {
                Padding::Replicate => p[sy.clamp(0, h as isize - 1) as usize * w + sx.clamp(0, w as isize - 1) as usize],
                _ if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize => T::zero(),
                _ => p[sy as usize * w + sx as usize],
            };
        }
    }
    (out, pw)
}

/// Applies one fixed `kh×kw` kernel to every plane of `[C,H,W]` / `[B,C,H,W]`.
pub fn filter2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.image_dims()?;
    let (kh, kw) = kernel.matrix_dims()?;
    let (oh, ow, _, _) = filter_geometry(h, w, kh, kw, padding)?;
    let (xs, ks) = (x.data(), kernel.data());
    let mut out = vec![T::zero(); b * c * oh * ow];
    for (plane, o) in out.chunks_exact_mut(oh * ow).enumerate() {
        let (pad, pw) = pad_plane(&xs[plane * h * w..(plane + 1) * h * w], h, w, kh, kw, padding);
        for u in 0..kh {
            for v in 0..kw {
                let kv = ks[u * kw + v];
                for (y, orow) in o.chunks_exact_mut(ow).enumerate() {
                    let src = &pad[(y + u) * pw + v..(y + u) * pw + v + ow];
                    for (ov, &sv) in orow.iter_mut().zip(src) {
                        *ov += kv * sv;
                    }
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out)?.ensure_finite("filter2d")
}

pub(crate) fn filter2d_backward<T: Scalar>(
    in_shape: &[usize],
    kernel: &Tensor<T>,
    padding: Padding,
    grad_out: &[T],
) -> Vec<T> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let planes: usize = in_shape[..r - 2].iter().product();
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let (oh, ow, py, px) = filter_geometry(h, w, kh, kw, padding).expect("validated in forward");
    let (ph, pw) = if padding == Padding::Valid { (h, w) } else { (h + kh - 1, w + kw - 1) };
    let ks = kernel.data();
    let mut gx = vec![T::zero(); planes * h * w];
    let mut gpad = vec![T::zero(); ph * pw];
    for plane in 0..planes {
        let go = &grad_out[plane * oh * ow..(plane + 1) * oh * ow];
        gpad.fill(T::zero());
        for u in 0..kh {
            for v in 0..kw {
                let kv = ks[u * kw + v];
                for (y, grow) in go.chunks_exact(ow).enumerate() {
                    let dst = &mut gpad[(y + u) * pw + v..(y + u) * pw + v + ow];
                    for (d, &g) in dst.iter_mut().zip(grow) {
                        *d += kv * g;
                    }
                }
            }
        }
        let g = &mut gx[plane * h * w..(plane + 1) * h * w];
        match padding {
            Padding::Valid => g.copy_from_slice(&gpad),
            Padding::Zero => {
                for y in 0..h {
                    let s0 = (y + py as usize) * pw + px as usize;
                    g[y * w..(y + 1) * w].copy_from_slice(&gpad[s0..s0 + w]);
                }
            }
            Padding::Replicate => {
                for yy in 0..ph {
                    let sy = (yy as isize - py).clamp(0, h as isize - 1) as usize;
                    for xx in 0..pw {
                        let sx = (xx as isize - px).clamp(0, w as isize - 1) as usize;
                        g[sy * w + sx] += gpad[yy * pw + xx];
                    }
                }
            }
        }
    }
    gx
}

/// Keeps every second row and column starting at index 0.
pub fn subsample2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.image_dims()?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let xs = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        for y in 0..oh {
            for xo in 0..ow {
                out.push(xs[plane * h * w + 2 * y * w + 2 * xo]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out)
}

pub(crate) fn subsample2_backward<T: Scalar>(in_shape: &[usize], grad_out: &[T]) -> Vec<T> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let planes: usize = in_shape[..r - 2].iter().product();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut gx = vec![T::zero(); planes * h * w];
    for plane in 0..planes {
        for y in 0..oh {
            for xo in 0..ow {
                gx[plane * h * w + 2 * y * w + 2 * xo] = grad_out[(plane * oh + y) * ow + xo];
            }
        }
    }
    gx
}

/// Normalizes each row of a matrix to zero mean and unit variance.
/// Returns the output and the per-row inverse standard deviations.
pub(crate) fn layer_norm_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Vec<T>)> {
    let (m, n) = x.matrix_dims()?;
    let nn = T::from_usize_exact(n);
    let mut out = Vec::with_capacity(m * n);
    let mut inv_std = Vec::with_capacity(m);
    for row in x.data().chunks(n) {
        let mean = row.iter().copied().sum::<T>() / nn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
        let inv = T::one() / (var + eps).sqrt();
        out.extend(row.iter().map(|&v| (v - mean) * inv));
        inv_std.push(inv);
    }
    debug_assert_eq!(inv_std.len(), m);
    Ok((Tensor::new(vec![m, n], out)?.ensure_finite("layer_norm")?, inv_std))
}

/// Adjoint of a normalization given normalized outputs `y` grouped into
/// sets of indices that share one statistic: `dx = inv/n · (n·dy − Σdy − y·Σ(dy·y))`.
fn normalize_backward_group<T: Scalar>(y: &[T], dy: &[T], idx: &[usize], inv: T, gx: &mut [T]) {
    let n = T::from_usize_exact(idx.len());
    let sum_dy: T = idx.iter().map(|&i| dy[i]).sum();
    let sum_dyy: T = idx.iter().map(|&i| dy[i] * y[i]).sum();
    for &i in idx {
        gx[i] = inv / n * (n * dy[i] - sum_dy - y[i] * sum_dyy);
    }
}

pub(crate) fn layer_norm_rows_backward<T: Scalar>(y: &Tensor<T>, inv_std: &[T], grad_out: &[T]) -> Vec<T> {
    let n = y.shape()[1];
    let mut gx = vec![T::zero(); y.len()];
    for (r, &inv) in inv_std.iter().enumerate() {
        let idx: Vec<usize> = (r * n..(r + 1) * n).collect();
        normalize_backward_group(y.data(), grad_out, &idx, inv, &mut gx);
    }
    gx
}

/// Per-channel normalization over batch and spatial positions of `[B,C,H,W]`
/// (rank 3 is a batch of one, i.e. instance normalization).
pub(crate) fn batch_norm<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Vec<T>)> {
    let (b, c, h, w) = x.image_dims()?;
    let hw = h * w;
    let count = T::from_usize_exact(b * hw);
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let planes = (0..b).map(|n| (n * c + ch) * hw);
        let mean = planes.clone().flat_map(|s| xs[s..s + hw].iter().copied()).sum::<T>() / count;
        let var = planes
            .clone()
            .flat_map(|s| xs[s..s + hw].iter().map(move |&v| (v - mean) * (v - mean)))
            .sum::<T>()
            / count;
        let inv = T::one() / (var + eps).sqrt();
        for s in planes {
            for i in s..s + hw {
                out[i] = (xs[i] - mean) * inv;
            }
        }
        inv_std.push(inv);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?.ensure_finite("batch_norm")?, inv_std))
}

pub(crate) fn batch_norm_backward<T: Scalar>(y: &Tensor<T>, inv_std: &[T], grad_out: &[T]) -> Vec<T> {
    let (b, c, h, w) = y.image_dims().expect("validated in forward");
    let hw = h * w;
    let mut gx = vec![T::zero(); y.len()];
    for (ch, &inv) in inv_std.iter().enumerate().take(c) {
        let idx: Vec<usize> = (0..b).flat_map(|n| ((n * c + ch) * hw)..((n * c + ch + 1) * hw)).collect();
        normalize_backward_group(y.data(), grad_out, &idx, inv, &mut gx);
    }
    gx
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

const GELU_COEF: f64 = 0.044715;

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(v: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (v + T::lit(GELU_COEF) * v * v * v);
    T::lit(0.5) * v * (T::one() + inner.tanh())
}

pub(crate) fn gelu_derivative<T: Scalar>(v: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(GELU_COEF);
    let inner = c * (v + k * v * v * v);
    let t = inner.tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * v * v)
}

/// Copies a `h×w` window at `(y0, x0)` out of every plane.
pub fn crop2d<T: Scalar>(x: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (b, c, ih, iw) = x.image_dims()?;
    if y0 + h > ih || x0 + w > iw || h == 0 || w == 0 {
        return Err(shape_err!("crop {h}x{w}@({y0},{x0}) outside {ih}x{iw}"));
    }
    let xs = x.data();
    let mut out = Vec::with_capacity(b * c * h * w);
    for plane in 0..b * c {
        for y in y0..y0 + h {
            let s = plane * ih * iw + y * iw + x0;
            out.extend_from_slice(&xs[s..s + w]);
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::new(shape, out)
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| shape_err!("stack of nothing"))?;
    if parts.iter().any(|p| p.shape() != first.shape()) {
        return Err(shape_err!("stack of mismatched shapes"));
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(first.shape());
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

/// Slice `index` along the leading axis.
pub fn select<T: Scalar>(x: &Tensor<T>, index: usize) -> Result<Tensor<T>> {
    let lead = x.shape()[0];
    if index >= lead || x.rank() < 2 {
        return Err(shape_err!("select {index} from {:?}", x.shape()));
    }
    let inner = x.len() / lead;
    Tensor::new(x.shape()[1..].to_vec(), x.data()[index * inner..(index + 1) * inner].to_vec())
}
