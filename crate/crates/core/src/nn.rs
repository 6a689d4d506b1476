//! Graph-level building blocks shared by every component: linear maps,
//! multi-head scaled dot-product attention, token MLPs, and the
//! feature-map/token-sequence reshapes between them.

use crate::error::{shape_err, Result};
use crate::params::{Ctx, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

pub const LN_EPS: f64 = 1e-5;

/// `x·W + b` with `W` stored as `{prefix}.weight [in×out]`, `b` as `{prefix}.bias [out]`.
pub fn linear<T: Scalar>(cx: &mut Ctx<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = cx.param(&format!("{prefix}.weight"))?;
    let b = cx.param(&format!("{prefix}.bias"))?;
    let y = cx.g.matmul(x, w)?;
    cx.g.add_row_bias(y, b)
}

pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) -> Result<()> {
    store.insert(&format!("{prefix}.weight"), init.xavier(&[fan_in, fan_out], fan_in, fan_out, gain)?)?;
    store.insert(&format!("{prefix}.bias"), crate::Tensor::zeros(&[fan_out])?)?;
    Ok(())
}

/// Output of the attention core, with the per-head probability matrices
/// kept for inspection.
#[derive(Clone, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// `softmax(Q_h K_hᵀ / sqrt(d_h)) V_h` per head, heads concatenated by column.
///
/// `q: [Nq×D]`, `k, v: [Nk×D]`.
pub fn attention_core<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Attended> {
    let (_, d) = g.value(q).matrix_dims()?;
    let (nk, dk) = g.value(k).matrix_dims()?;
    let (nv, dv) = g.value(v).matrix_dims()?;
    if heads == 0 || d % heads != 0 {
        return Err(crate::Error::Config(format!("width {d} not divisible into {heads} heads")));
    }
    if dk != d || dv != d || nk != nv {
        return Err(shape_err!("attention q/k/v widths {d}/{dk}/{dv}, keys {nk} values {nv}"));
    }
    let dh = d / heads;
    let scale = T::one() / T::from_usize_exact(dh).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, (h + 1) * dh)?,
                g.slice_cols(k, h * dh, (h + 1) * dh)?,
                g.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale)?;
        let p = g.softmax(logits, 1)?;
        outs.push(g.matmul(p, vh)?);
        weights.push(p);
    }
    let output = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok(Attended { output, weights })
}

/// Multi-head attention with learned projections under `prefix`
/// (`.q`, `.k`, `.v`, `.out`), no residual.
pub fn attention<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
    prefix: &str,
) -> Result<Attended> {
    let q = linear(cx, queries, &format!("{prefix}.q"))?;
    let k = linear(cx, keys, &format!("{prefix}.k"))?;
    let v = linear(cx, values, &format!("{prefix}.v"))?;
    let core = attention_core(&mut cx.g, q, k, v, heads)?;
    let output = linear(cx, core.output, &format!("{prefix}.out"))?;
    Ok(Attended { output, weights: core.weights })
}

pub fn init_attention<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init<'_>, prefix: &str, dim: usize) -> Result<()> {
    for part in ["q", "k", "v", "out"] {
        init_linear(store, init, &format!("{prefix}.{part}"), dim, dim, 1.0)?;
    }
    Ok(())
}

/// Two-layer GELU MLP under `prefix` (`.fc1`, `.fc2`).
pub fn mlp<T: Scalar>(cx: &mut Ctx<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(cx, x, &format!("{prefix}.fc1"))?;
    let h = cx.g.gelu(h)?;
    linear(cx, h, &format!("{prefix}.fc2"))
}

pub fn init_mlp<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_>,
    prefix: &str,
    dims: (usize, usize, usize),
) -> Result<()> {
    init_linear(store, init, &format!("{prefix}.fc1"), dims.0, dims.1, 1.0)?;
    init_linear(store, init, &format!("{prefix}.fc2"), dims.1, dims.2, 1.0)
}

/// `[C×H×W]` feature map to a `[H·W × C]` token sequence.
pub fn map_to_tokens<T: Scalar>(g: &mut Graph<T>, map: Var) -> Result<Var> {
    let s = g.shape(map).to_vec();
    let [c, h, w] = s[..] else {
        return Err(shape_err!("expected [C,H,W], got {s:?}"));
    };
    let flat = g.reshape(map, &[c, h * w])?;
    g.transpose(flat)
}

/// `[H·W × C]` token sequence back to a `[C×H×W]` map.
pub fn tokens_to_map<T: Scalar>(g: &mut Graph<T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let (n, c) = g.value(tokens).matrix_dims()?;
    if n != h * w {
        return Err(shape_err!("{n} tokens for a {h}x{w} grid"));
    }
    let t = g.transpose(tokens)?;
    g.reshape(t, &[c, h, w])
}
