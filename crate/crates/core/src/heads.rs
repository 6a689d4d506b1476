//! Segmentation and matting prediction heads: an upsampling conv stack over
//! the decoded features, dotted per pixel with a functional produced from
//! the task token.

use serde::{Deserialize, Serialize};

use crate::adapter::{MATTE_TOKEN, SEG_TOKEN};
use crate::error::{shape_err, Error, Result};
use crate::nn;
use crate::params::{Ctx, Init, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Matte,
}

impl Task {
    pub fn token_index(self) -> usize {
        match self {
            Task::Seg => SEG_TOKEN,
            Task::Matte => MATTE_TOKEN,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Task::Seg => "head.seg",
            Task::Matte => "head.matte",
        }
    }

    pub fn group(self) -> ParamGroup {
        match self {
            Task::Seg => ParamGroup::SegHead,
            Task::Matte => ParamGroup::MatteHead,
        }
    }

    pub fn other(self) -> Task {
        match self {
            Task::Seg => Task::Matte,
            Task::Matte => Task::Seg,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" => Ok(Task::Seg),
            "matte" => Ok(Task::Matte),
            _ => Err(Error::Config(format!("unknown task `{s}` (expected seg or matte)"))),
        }
    }
}

/// Output resolution and the channel width of each ×2 upsampling stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub target_resolution: usize,
    pub channels: Vec<usize>,
}

impl HeadConfig {
    /// Stage count from the resolution law; widths halve from `min(D/2, 64)`
    /// with a floor of 8.
    pub fn for_grid(feature_res: usize, target_res: usize, embed_dim: usize) -> Result<Self> {
        let stages = stage_count(feature_res, target_res)?;
        let top = (embed_dim / 2).clamp(1, 64);
        let channels = (0..stages).map(|s| (top >> s).max(8)).collect();
        Ok(Self { target_resolution: target_res, channels })
    }

    pub fn up_stages(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self, feature_res: usize) -> Result<()> {
        let stages = stage_count(feature_res, self.target_resolution)?;
        if stages != self.channels.len() {
            return Err(Error::Config(format!(
                "head has {} stages but {feature_res} -> {} needs {stages}",
                self.channels.len(),
                self.target_resolution
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("head channel widths must be positive".into()));
        }
        Ok(())
    }
}

fn stage_count(feature_res: usize, target_res: usize) -> Result<usize> {
    let mut r = feature_res;
    let mut n = 0;
    while r < target_res && r > 0 {
        r *= 2;
        n += 1;
    }
    if r != target_res || feature_res == 0 {
        return Err(Error::Config(format!(
            "target resolution {target_res} is not feature resolution {feature_res} times a power of two"
        )));
    }
    Ok(n)
}

pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init<'_>, cfg: &HeadConfig, embed_dim: usize) -> Result<()> {
    for task in [Task::Seg, Task::Matte] {
        let p = task.prefix();
        let mut cin = embed_dim;
        for (s, &cout) in cfg.channels.iter().enumerate() {
            let w = init.xavier(&[cout, cin, 3, 3], cin * 9, cout * 9, 1.0)?;
            store.insert(&format!("{p}.stage{s}.conv.weight"), w)?;
            store.insert(&format!("{p}.stage{s}.conv.bias"), Tensor::zeros(&[cout])?)?;
            store.insert(&format!("{p}.stage{s}.norm.gamma"), Tensor::full(&[cout], T::one())?)?;
            store.insert(&format!("{p}.stage{s}.norm.beta"), Tensor::zeros(&[cout])?)?;
            cin = cout;
        }
        nn::init_mlp(store, init, &format!("{p}.token_mlp"), (embed_dim, embed_dim, cin))?;
    }
    Ok(())
}

/// Predicts `[B×1×R×R]` maps in `[0,1]`.
///
/// `tokens`: one decoded `[T×D]` token block per batch entry;
/// `feats`: decoded features stacked as `[B×D×h×w]`.
pub fn predict<T: Scalar>(cx: &mut Ctx<'_, T>, cfg: &HeadConfig, task: Task, tokens: &[Var], feats: Var) -> Result<Var> {
    let [b, _, h, w] = cx.g.shape(feats)[..] else {
        return Err(shape_err!("head features must be [B,C,h,w], got {:?}", cx.g.shape(feats)));
    };
    if h != w {
        return Err(shape_err!("head expects a square feature grid, got {h}x{w}"));
    }
    if tokens.len() != b {
        return Err(shape_err!("{} token blocks for batch {b}", tokens.len()));
    }
    cfg.validate(h)?;
    let p = task.prefix();
    let mut x = feats;
    let mut r = h;
    for s in 0..cfg.up_stages() {
        r *= 2;
        x = cx.g.bilinear_resize(x, r, r)?;
        let cw = cx.param(&format!("{p}.stage{s}.conv.weight"))?;
        let cb = cx.param(&format!("{p}.stage{s}.conv.bias"))?;
        x = cx.g.conv2d(x, cw, cb)?;
        x = cx.g.batch_norm(x, T::lit(BN_EPS))?;
        let gamma = cx.param(&format!("{p}.stage{s}.norm.gamma"))?;
        let beta = cx.param(&format!("{p}.stage{s}.norm.beta"))?;
        x = cx.g.channel_affine(x, gamma, beta)?;
        x = cx.g.gelu(x)?;
    }
    let c = cx.g.shape(x)[1];
    let idx = task.token_index();
    let mut logits = Vec::with_capacity(b);
    for (n, &tok) in tokens.iter().enumerate() {
        let t = cx.g.slice_rows(tok, idx, idx + 1)?;
        let functional = nn::mlp(cx, t, &format!("{p}.token_mlp"))?;
        let pixels = cx.g.select(x, n)?;
        let pixels = cx.g.reshape(pixels, &[c, r * r])?;
        let l = cx.g.matmul(functional, pixels)?;
        logits.push(cx.g.reshape(l, &[1, r, r])?);
    }
    let stacked = cx.g.stack(&logits)?;
    cx.g.sigmoid(stacked)
}
