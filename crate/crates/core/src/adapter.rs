//! Token block assembly, the two-stage localization adapter with its
//! confidence-gated residual, and the two-round decode loop.

use crate::backbone;
use crate::error::{shape_err, Result};
use crate::multiview::{quadrant_origin, VIEW_COUNT};
use crate::nn::{self, Attended};
use crate::params::{Ctx, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Decoder layer + adapter rounds.
pub const ROUNDS: usize = 2;
pub const SEG_TOKEN: usize = 0;
pub const MATTE_TOKEN: usize = 1;
pub const TASK_TOKENS: usize = 2;
pub const SAM_MASK_TOKENS: usize = 4;
pub const IOU_TOKENS: usize = 1;
/// Rows preceding the prompt tokens.
pub const FIXED_TOKENS: usize = TASK_TOKENS + SAM_MASK_TOKENS + IOU_TOKENS;

/// Ordered token sequence `[task(2), sam_mask(4), iou(1), prompt(N)]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenBlock {
    pub tokens: Var,
    pub prompt_count: usize,
}

impl TokenBlock {
    pub fn len(&self) -> usize {
        FIXED_TOKENS + self.prompt_count
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Whether row `i` carries gradients (only the two task tokens do).
    pub fn row_trainable(i: usize) -> bool {
        i < TASK_TOKENS
    }
}

pub fn init_tokens<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init<'_>, dim: usize) -> Result<()> {
    store.insert("tokens.task", init.normal(&[TASK_TOKENS, dim], 0.5)?)?;
    store.insert("tokens.sam_mask", init.normal(&[SAM_MASK_TOKENS, dim], 0.5)?)?;
    store.insert("tokens.iou", init.normal(&[IOU_TOKENS, dim], 0.5)?)
}

pub fn assemble_tokens<T: Scalar>(cx: &mut Ctx<'_, T>, prompt: Option<&Tensor<T>>) -> Result<TokenBlock> {
    let task = cx.param("tokens.task")?;
    let mask = cx.param("tokens.sam_mask")?;
    let iou = cx.param("tokens.iou")?;
    let d = cx.g.shape(task)[1];
    let mut parts = vec![task, mask, iou];
    let mut prompt_count = 0;
    if let Some(p) = prompt {
        let (n, dp) = p.matrix_dims()?;
        if dp != d {
            return Err(shape_err!("prompt tokens have width {dp}, model width is {d}"));
        }
        prompt_count = n;
        parts.push(cx.g.constant(p.clone()));
    }
    Ok(TokenBlock { tokens: cx.g.concat_rows(&parts)?, prompt_count })
}

pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init<'_>, dim: usize) -> Result<()> {
    for r in 1..=ROUNDS {
        let p = format!("adapter.round{r}");
        nn::init_attention(store, init, &format!("{p}.stage1"), dim)?;
        nn::init_attention(store, init, &format!("{p}.stage2"), dim)?;
        store.insert(&format!("{p}.conf.weight"), init.xavier(&[dim, dim, 1, 1], dim, dim, 1.0)?)?;
        store.insert(&format!("{p}.conf.bias"), Tensor::zeros(&[dim])?)?;
    }
    Ok(())
}

/// Upsamples each quadrant of the early features `[C×h×w]` to the full grid
/// (the geometry of the matching local view) and stacks them as one
/// `[4·h·w × C]` token sequence in TL, TR, BL, BR order.
pub fn early_quadrant_tokens<T: Scalar>(cx: &mut Ctx<'_, T>, early: Var) -> Result<Var> {
    let [_, h, w] = cx.g.shape(early)[..] else {
        return Err(shape_err!("early features must be [C,h,w]"));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("early grid {h}x{w} has no quadrants"));
    }
    let mut parts = Vec::with_capacity(VIEW_COUNT);
    for m in 0..VIEW_COUNT {
        let (y0, x0) = quadrant_origin(m, h / 2, w / 2);
        let q = cx.g.crop2d(early, y0, x0, h / 2, w / 2)?;
        let up = cx.g.bilinear_resize(q, h, w)?;
        parts.push(nn::map_to_tokens(&mut cx.g, up)?);
    }
    cx.g.concat_rows(&parts)
}

/// Stacks four `[C×h×w]` localized maps into a `[4·h·w × C]` sequence.
pub fn local_tokens<T: Scalar>(cx: &mut Ctx<'_, T>, maps: &[Var; VIEW_COUNT]) -> Result<Var> {
    let parts = maps.iter().map(|&m| nn::map_to_tokens(&mut cx.g, m)).collect::<Result<Vec<_>>>()?;
    cx.g.concat_rows(&parts)
}

#[derive(Clone, Debug)]
pub struct AdapterStages {
    /// Fused local-aware features `F''`, `[S×C]`.
    pub fused: Var,
    /// Stage-2 output, `[4S×C]`, the local input of the next round.
    pub carry: Var,
    pub stage1: Attended,
    pub stage2: Attended,
}

/// Stage 1: decoder features query the local sequence (plus early features).
/// Stage 2: the local sequence queries the stage-1 output, with a residual.
///
/// `f_out: [S×C]`, `local, early: [4S×C]`.
pub fn adapter_attend<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    round: usize,
    heads: usize,
    f_out: Var,
    local: Var,
    early: Var,
) -> Result<AdapterStages> {
    if cx.g.shape(local) != cx.g.shape(early) {
        return Err(shape_err!("local {:?} and early {:?} sequences differ", cx.g.shape(local), cx.g.shape(early)));
    }
    let p = format!("adapter.round{round}");
    let kv = cx.g.add(local, early)?;
    let stage1 = nn::attention(cx, f_out, kv, kv, heads, &format!("{p}.stage1"))?;
    let stage2 = nn::attention(cx, kv, stage1.output, stage1.output, heads, &format!("{p}.stage2"))?;
    let carry = cx.g.add(kv, stage2.output)?;
    Ok(AdapterStages { fused: stage1.output, carry, stage1, stage2 })
}

/// Recorded quantities of one confidence-gated fusion.
#[derive(Clone, Copy, Debug)]
pub struct AdapterState {
    /// Decoder-layer output `F_out`, `[C×h×w]`.
    pub f_out: Var,
    /// `F''` as a `[C×h×w]` map.
    pub fused: Var,
    /// `σ(conv1×1(F_out)) ⊙ F''`.
    pub conf: Var,
    /// `F_out + conf`.
    pub output: Var,
}

/// `F'_out = F_out + σ(conv1×1(F_out)) ⊙ F''` on `[C×h×w]` maps.
pub fn confidence_fuse<T: Scalar>(cx: &mut Ctx<'_, T>, round: usize, f_out: Var, fused: Var) -> Result<AdapterState> {
    if cx.g.shape(f_out) != cx.g.shape(fused) {
        return Err(shape_err!("F_out {:?} vs fused {:?}", cx.g.shape(f_out), cx.g.shape(fused)));
    }
    let w = cx.param(&format!("adapter.round{round}.conf.weight"))?;
    let b = cx.param(&format!("adapter.round{round}.conf.bias"))?;
    let gate = cx.g.conv2d(f_out, w, b)?;
    let gate = cx.g.sigmoid(gate)?;
    let conf = cx.g.mul(gate, fused)?;
    let output = cx.g.add(f_out, conf)?;
    Ok(AdapterState { f_out, fused, conf, output })
}

/// Inputs of the decode loop for one sample.
pub struct DecodeInput {
    pub tokens: TokenBlock,
    /// Image features with the dense prompt addend, `[C×h×w]`.
    pub feats: Var,
    /// Localized view maps; unused when the adapter is disabled.
    pub local: Option<[Var; VIEW_COUNT]>,
    /// Early encoder features, `[C×h×w]`.
    pub early: Var,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub tokens: Var,
    /// `[C×h×w]`
    pub feats: Var,
    pub rounds: Vec<AdapterState>,
    /// Adapter attention of each round (empty without the adapter).
    pub stages: Vec<AdapterStages>,
}

/// Two rounds of (frozen decoder layer → adapter). Without localized maps
/// this is the plain decoder.
pub fn decode<T: Scalar>(cx: &mut Ctx<'_, T>, heads: usize, input: DecodeInput) -> Result<Decoded> {
    let [_, h, w] = cx.g.shape(input.feats)[..] else {
        return Err(shape_err!("decoder features must be [C,h,w]"));
    };
    let pe = backbone::grid_encoding(h, w, cx.store().get("backbone.prompt.pe_gaussian")?)?;
    let pe = cx.g.constant(pe);
    let early = match input.local {
        Some(_) => Some(early_quadrant_tokens(cx, input.early)?),
        None => None,
    };
    let mut local = match &input.local {
        Some(maps) => Some(local_tokens(cx, maps)?),
        None => None,
    };
    let mut tokens = input.tokens.tokens;
    let mut feats = nn::map_to_tokens(&mut cx.g, input.feats)?;
    let mut rounds = Vec::new();
    let mut all_stages = Vec::new();
    for r in 1..=ROUNDS {
        let (t, f_out) = backbone::decoder_layer(cx, r, heads, tokens, feats, pe)?;
        tokens = t;
        feats = f_out;
        if let (Some(loc), Some(early)) = (local, early) {
            let stages = adapter_attend(cx, r, heads, f_out, loc, early)?;
            let f_map = nn::tokens_to_map(&mut cx.g, f_out, h, w)?;
            let fused = nn::tokens_to_map(&mut cx.g, stages.fused, h, w)?;
            let state = confidence_fuse(cx, r, f_map, fused)?;
            feats = nn::map_to_tokens(&mut cx.g, state.output)?;
            local = Some(stages.carry);
            rounds.push(state);
            all_stages.push(stages);
        }
    }
    let feats = nn::tokens_to_map(&mut cx.g, feats, h, w)?;
    Ok(Decoded { tokens, feats, rounds, stages: all_stages })
}
