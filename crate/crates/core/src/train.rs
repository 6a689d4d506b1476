//! Training configuration, Adam, and the alternating multi-task loop with
//! the freeze policy: frozen groups never enter the optimizer, and the
//! inactive task's head is neither differentiated nor stepped.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderConfig, PromptSet};
use crate::error::{Error, Result};
use crate::heads::Task;
use crate::model::{Encoded, Model, ModelConfig, DEFAULT_RECEPTIVE_FIELDS};
use crate::objectives::{composite_loss, LossBreakdown, LossWeights, Targets, LAPLACIAN_LEVELS};
use crate::params::{Ctx, GroupMask, ParamStore};
use crate::scalar::Scalar;
use crate::synth::{generate_sample, sample_prompts, PromptMode, SynthSample};
use crate::tensor::ops::{bilinear_resize, stack};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSchedule {
    /// seg, matte, seg, ... one task per batch
    Alternate,
    SegOnly,
    MatteOnly,
}

impl TaskSchedule {
    pub fn task_at(self, step: u64) -> Task {
        match self {
            TaskSchedule::Alternate if step.is_multiple_of(2) => Task::Seg,
            TaskSchedule::Alternate => Task::Matte,
            TaskSchedule::SegOnly => Task::Seg,
            TaskSchedule::MatteOnly => Task::Matte,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub image_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub task_schedule: TaskSchedule,
    pub output_resolution: usize,
    /// Distinct synthetic training samples, cycled in order.
    pub dataset_size: usize,
    /// Seed of the first training sample; sample `i` uses `sample_seed + i`.
    pub sample_seed: u64,
    /// Prompt kinds drawn uniformly per sample and step.
    pub prompt_modes: Vec<PromptMode>,
    pub receptive_fields: Vec<usize>,
    pub use_adapter: bool,
    pub loss_weights: LossWeights,
    pub laplacian_levels: usize,
    pub checkpoint_path: Option<String>,
    pub log_path: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            embed_dim: 32,
            heads: 4,
            encoder_depth: 2,
            lr: 5e-4,
            batch_size: 2,
            max_steps: 500,
            task_schedule: TaskSchedule::Alternate,
            output_resolution: 256,
            dataset_size: 32,
            sample_seed: 0,
            prompt_modes: vec![
                PromptMode::Box,
                PromptMode::Points { k: 1 },
                PromptMode::Points { k: 3 },
                PromptMode::NoisyBox,
                PromptMode::CoarseMask,
            ],
            receptive_fields: DEFAULT_RECEPTIVE_FIELDS.to_vec(),
            use_adapter: true,
            loss_weights: LossWeights::default(),
            laplacian_levels: LAPLACIAN_LEVELS,
            checkpoint_path: None,
            log_path: None,
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(field("lr", "must be a positive finite number"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(field("image_size", "must be a positive multiple of 32"));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(4) {
            return Err(field("embed_dim", "must be a positive multiple of 4"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(field("heads", "must divide embed_dim"));
        }
        if self.encoder_depth == 0 {
            return Err(field("encoder_depth", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be at least 1"));
        }
        if self.dataset_size == 0 {
            return Err(field("dataset_size", "must be at least 1"));
        }
        if self.prompt_modes.is_empty() {
            return Err(field("prompt_modes", "must list at least one prompt kind"));
        }
        if self.prompt_modes.contains(&PromptMode::Points { k: 0 }) {
            return Err(field("prompt_modes", "point prompts need k >= 1"));
        }
        if self.laplacian_levels == 0 {
            return Err(field("laplacian_levels", "must be at least 1"));
        }
        if !self.output_resolution.is_multiple_of(1 << self.laplacian_levels) {
            return Err(field("output_resolution", format!("must be divisible by 2^{}", self.laplacian_levels)));
        }
        self.model_config().map_err(|e| field("output_resolution", e))?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let encoder = EncoderConfig { embed_dim: self.embed_dim, depth: self.encoder_depth, heads: self.heads, early_block: 1 };
        let mut cfg = ModelConfig::new(self.image_size, encoder, self.output_resolution)?;
        cfg.receptive_fields = self.receptive_fields.clone();
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot<T = f64> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Steps applied to this parameter (bias correction is per parameter,
    /// since gated heads skip steps).
    pub t: u64,
}

/// Adam over a fixed set of parameter names.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar = f64> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub slots: BTreeMap<String, AdamSlot<T>>,
}

impl<T: Scalar> Adam<T> {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    /// Optimizer over exactly the trainable parameters of `store`.
    pub fn for_trainable(store: &ParamStore<T>, lr: f64) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for name in store.trainable_names() {
            let n = store.get(&name)?.len();
            slots.insert(name, AdamSlot { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 });
        }
        Ok(Self { lr, beta1: Self::BETA1, beta2: Self::BETA2, eps: Self::EPS, slots })
    }

    /// Errors unless the optimizer's parameter set equals the trainable set.
    pub fn check_matches(&self, store: &ParamStore<T>) -> Result<()> {
        let ours: BTreeSet<&str> = self.slots.keys().map(String::as_str).collect();
        let trainable: Vec<String> = store.trainable_names();
        let theirs: BTreeSet<&str> = trainable.iter().map(String::as_str).collect();
        if ours != theirs {
            let extra: Vec<_> = ours.difference(&theirs).collect();
            let missing: Vec<_> = theirs.difference(&ours).collect();
            return Err(Error::Contract(format!("optimizer set differs from trainable set: extra {extra:?}, missing {missing:?}")));
        }
        Ok(())
    }

    /// One update of every parameter present in `grads`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Vec<T>>) -> Result<()> {
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps, lr) = (T::one(), T::lit(self.eps), T::lit(self.lr));
        for (name, g) in grads {
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for non-optimized parameter `{name}`")))?;
            let p = store.get_mut(name)?;
            if g.len() != p.len() {
                return Err(Error::Contract(format!("gradient length mismatch for `{name}`")));
            }
            slot.t += 1;
            let t = slot.t as i32;
            let c1 = one - b1.powi(t);
            let c2 = one - b2.powi(t);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g).enumerate() {
                slot.m[i] = b1 * slot.m[i] + (one - b1) * gi;
                slot.v[i] = b2 * slot.v[i] + (one - b2) * gi * gi;
                let mh = slot.m[i] / c1;
                let vh = slot.v[i] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub task: Task,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// A training sample with its cached frozen encoding.
pub struct Prepared<T: Scalar> {
    pub sample: SynthSample<T>,
    pub encoded: Encoded<T>,
}

pub struct Trainer<T: Scalar = f64> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub step: u64,
    data: Vec<Prepared<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model_config()?, config.seed)?;
        Self::resume(config, model, None, 0)
    }

    /// Continues from a model (and optionally optimizer state) at `step`.
    pub fn resume(config: TrainConfig, model: Model<T>, adam: Option<Adam<T>>, step: u64) -> Result<Self> {
        config.validate()?;
        let adam = match adam {
            Some(a) => a,
            None => Adam::for_trainable(&model.store, config.lr)?,
        };
        adam.check_matches(&model.store)?;
        let mut data = Vec::with_capacity(config.dataset_size);
        for i in 0..config.dataset_size as u64 {
            let sample = generate_sample(config.sample_seed + i, config.image_size)?;
            let img = sample.image.reshape(&[1, 3, config.image_size, config.image_size])?;
            let encoded = model.encode(&img)?;
            data.push(Prepared { sample, encoded });
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_7a5c);
        let mut t = Self { config, model, adam, step: 0, data, rng };
        // replay the prompt stream so a resumed run matches an uninterrupted one
        for s in 0..step {
            t.draw_prompts(s)?;
        }
        t.step = step;
        Ok(t)
    }

    pub fn samples(&self) -> impl Iterator<Item = &SynthSample<T>> {
        self.data.iter().map(|p| &p.sample)
    }

    fn batch_indices(&self, step: u64) -> Vec<usize> {
        let b = self.config.batch_size as u64;
        (0..b).map(|j| ((step * b + j) % self.config.dataset_size as u64) as usize).collect()
    }

    fn draw_prompts(&mut self, step: u64) -> Result<Vec<PromptSet<T>>> {
        let idx = self.batch_indices(step);
        let mut out = Vec::with_capacity(idx.len());
        for i in idx {
            let mode = self.config.prompt_modes[self.rng.gen_range(0..self.config.prompt_modes.len())];
            let seed: u64 = self.rng.gen();
            out.push(sample_prompts(&self.data[i].sample.mask, seed, mode)?);
        }
        Ok(out)
    }

    /// Ground truth for `task` at the head resolution, `[B×1×R×R]`.
    fn targets(&self, idx: &[usize], task: Task) -> Result<Tensor<T>> {
        let r = self.config.output_resolution;
        let maps = idx
            .iter()
            .map(|&i| {
                let s = &self.data[i].sample;
                let src = match task {
                    Task::Seg => &s.mask,
                    Task::Matte => &s.alpha,
                };
                if src.shape()[1] == r {
                    Ok(src.clone())
                } else {
                    bilinear_resize(src, r, r)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        stack(&maps.iter().collect::<Vec<_>>())
    }

    /// One optimization step on the next batch.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let task = self.config.task_schedule.task_at(step);
        let idx = self.batch_indices(step);
        let prompts = self.draw_prompts(step)?;
        let enc = Encoded::concat(&idx.iter().map(|&i| &self.data[i].encoded).collect::<Vec<_>>())?;
        let target = self.targets(&idx, task)?;
        let mask = GroupMask::all_trainable().without(task.other().group());
        let (grads, loss) = {
            let mut cx = Ctx::train(&self.model.store, mask);
            let out = self.model.forward(&mut cx, &enc, &prompts, &[task], self.config.use_adapter)?;
            let pred = out.prediction(task).expect("requested task");
            let tv = cx.g.constant(target);
            let targets = match task {
                Task::Seg => Targets { mask: Some(tv), alpha: None },
                Task::Matte => Targets { mask: None, alpha: Some(tv) },
            };
            let (total, loss) =
                composite_loss(&mut cx.g, task, pred, targets, &self.config.loss_weights, self.config.laplacian_levels)?;
            cx.g.backward(total)?;
            (cx.gradients(), loss)
        };
        self.adam.step(&mut self.model.store, &grads)?;
        self.step += 1;
        Ok(StepLog { step, task, loss })
    }

    pub fn checkpoint(&self) -> crate::checkpoint::Checkpoint<T> {
        use crate::checkpoint::{Checkpoint, Header};
        Checkpoint {
            header: Header { model: self.model.config.clone(), train: Some(self.config.clone()), step: self.step },
            model: self.model.clone(),
            adam: Some(self.adam.clone()),
        }
    }

    /// Runs until `max_steps`, writing one JSON line per step to `log`.
    pub fn run<W: Write>(&mut self, mut log: Option<W>) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.step < self.config.max_steps {
            let entry = self.train_step()?;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&entry)?)?;
            }
            logs.push(entry);
        }
        Ok(logs)
    }
}
