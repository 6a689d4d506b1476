//! Named parameters, their trainability groups, and the per-forward binding
//! of parameters onto a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Ownership group of a parameter, derived from its name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Stub image encoder (`backbone.encoder.*`).
    Encoder,
    /// Prompt encoder (`backbone.prompt.*`).
    PromptEncoder,
    /// Two-way decoder layers (`backbone.decoder.*`).
    Decoder,
    /// Mask tokens and IoU token (`tokens.sam_mask`, `tokens.iou`).
    SamTokens,
    /// Segmentation and matting output tokens (`tokens.task`).
    TaskTokens,
    /// Per-view cross-attention of the multi-view encoder (`mvle.*`).
    MultiView,
    /// Local adapter rounds (`adapter.*`).
    Adapter,
    SegHead,
    MatteHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::Encoder,
        ParamGroup::PromptEncoder,
        ParamGroup::Decoder,
        ParamGroup::SamTokens,
        ParamGroup::TaskTokens,
        ParamGroup::MultiView,
        ParamGroup::Adapter,
        ParamGroup::SegHead,
        ParamGroup::MatteHead,
    ];

    pub fn of(name: &str) -> Result<Self> {
        let group = if name.starts_with("backbone.encoder.") {
            Self::Encoder
        } else if name.starts_with("backbone.prompt.") {
            Self::PromptEncoder
        } else if name.starts_with("backbone.decoder.") {
            Self::Decoder
        } else if name == "tokens.sam_mask" || name == "tokens.iou" {
            Self::SamTokens
        } else if name == "tokens.task" {
            Self::TaskTokens
        } else if name.starts_with("mvle.") {
            Self::MultiView
        } else if name.starts_with("adapter.") {
            Self::Adapter
        } else if name.starts_with("head.seg.") {
            Self::SegHead
        } else if name.starts_with("head.matte.") {
            Self::MatteHead
        } else {
            return Err(Error::Contract(format!("parameter `{name}` belongs to no group")));
        };
        Ok(group)
    }

    /// Pretrained-stand-in groups never enter the optimizer.
    pub fn trainable(self) -> bool {
        !matches!(self, Self::Encoder | Self::PromptEncoder | Self::Decoder | Self::SamTokens)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f64> {
    pub tensor: Tensor<T>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f64> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let group = ParamGroup::of(name)?;
        if self.params.insert(name.to_owned(), Param { tensor, group }).is_some() {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Names of parameters the optimizer may ever update.
    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|(_, p)| p.group.trainable()).map(|(k, _)| k.clone()).collect()
    }

    pub fn group_len(&self, group: ParamGroup) -> usize {
        self.params.values().filter(|p| p.group == group).map(|p| p.tensor.len()).sum()
    }

    /// Serialized bytes (names, shapes, little-endian values) of one group.
    pub fn group_bytes(&self, group: ParamGroup) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, p) in self.params.iter().filter(|(_, p)| p.group == group) {
            out.extend_from_slice(name.as_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&p.tensor.to_le_bytes());
        }
        out
    }

    pub fn fill_group(&mut self, group: ParamGroup, value: T) {
        for p in self.params.values_mut().filter(|p| p.group == group) {
            p.tensor.data_mut().fill(value);
        }
    }

    /// Sets every parameter whose name starts with `prefix` to `value`.
    pub fn fill_prefix(&mut self, prefix: &str, value: T) -> usize {
        let mut n = 0;
        for (_, p) in self.params.iter_mut().filter(|(k, _)| k.starts_with(prefix)) {
            p.tensor.data_mut().fill(value);
            n += 1;
        }
        n
    }

    pub fn total_len(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }
}

/// Deterministic parameter initializer.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform in `±gain·sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier<T: Scalar>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize, gain: f64) -> Result<Tensor<T>> {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(shape, |_| T::lit(self.rng.gen_range(-bound..=bound)))
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Result<Tensor<T>> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(format!("normal init: {e}")))?;
        Tensor::from_fn(shape, |_| T::lit(dist.sample(self.rng)))
    }
}

/// Which groups receive gradients during one forward/backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupMask(u16);

impl GroupMask {
    pub const NONE: GroupMask = GroupMask(0);

    pub fn with(self, group: ParamGroup) -> Self {
        Self(self.0 | (1 << group as u16))
    }

    pub fn without(self, group: ParamGroup) -> Self {
        Self(self.0 & !(1 << group as u16))
    }

    pub fn contains(self, group: ParamGroup) -> bool {
        self.0 & (1 << group as u16) != 0
    }

    /// Every trainable group.
    pub fn all_trainable() -> Self {
        ParamGroup::ALL.iter().filter(|g| g.trainable()).fold(Self::NONE, |m, &g| m.with(g))
    }
}

/// A forward pass in progress: the graph plus the parameters bound onto it.
pub struct Ctx<'a, T: Scalar = f64> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    mask: GroupMask,
    bound: HashMap<String, Var>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Recording context where parameters in `mask` require gradients.
    pub fn train(store: &'a ParamStore<T>, mask: GroupMask) -> Self {
        Self { g: Graph::new(), store, mask, bound: HashMap::new() }
    }

    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self { g: Graph::inference(), store, mask: GroupMask::NONE, bound: HashMap::new() }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Binds `name` as a graph leaf (once per context).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
        let trainable = p.group.trainable() && self.mask.contains(p.group);
        let v = self.g.leaf(p.tensor.clone(), trainable);
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter that required one, by name.
    pub fn gradients(&self) -> BTreeMap<String, Vec<T>> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| self.g.value(v).grad().map(|gr| (name.clone(), gr.to_vec())))
            .collect()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }
}
