//! Training loops for the digit classifier and the pairwise scorer.
//!
//! Both loops share the learning-rate schedule, optimiser and epoch
//! bookkeeping. All randomness (initialisation, shuffling, pair sampling)
//! derives from the single configured seed, and the loops are
//! single-threaded, so a run is bit-reproducible.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{class_index_table, sample_pair, LabeledImage, PairSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{forward_patches, stack_channels, Checkpoint, Model, ModelConfig, TrainingMeta};
use crate::optim::{AdamW, AdamWState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vit,
    Cevit,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Vit => "vit",
            ModelKind::Cevit => "cevit",
        }
    }

    pub fn default_config(self) -> ModelConfig {
        match self {
            ModelKind::Vit => ModelConfig::vit(),
            ModelKind::Cevit => ModelConfig::cevit(),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(ModelKind::Vit),
            "cevit" => Ok(ModelKind::Cevit),
            other => Err(Error::Argument(format!("unknown model `{other}` (expected vit or cevit)"))),
        }
    }
}

/// Step decay: the rate is multiplied by `factor` every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub factor: f32,
    pub every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            factor: 0.9,
            every: 20,
        }
    }
}

impl LrSchedule {
    /// Learning rate in effect during `epoch` (0-based).
    pub fn at(&self, epoch: usize) -> f32 {
        let steps = (epoch / self.every.max(1)) as i32;
        (self.base_lr as f64 * (self.factor as f64).powi(steps)) as f32
    }
}

/// `0.001 · 0.9^⌊epoch / 20⌋`.
pub fn lr_schedule(epoch: usize) -> f32 {
    LrSchedule::default().at(epoch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub seed: u64,
    pub desk_scale: bool,
    /// Sampled pairs per epoch for the pairwise model.
    pub pairs_per_epoch: usize,
    /// Held-out pairs scored after each epoch of pairwise training.
    pub eval_pairs: usize,
    pub optimizer: AdamW,
    /// Architecture; defaults to the standard configuration for `model`.
    pub architecture: ModelConfig,
}

impl TrainConfig {
    /// Full-length protocol: 200 epochs.
    pub fn full(model: ModelKind) -> Self {
        Self {
            model,
            epochs: 200,
            schedule: LrSchedule::default(),
            batch_size: 128,
            seed: 0,
            desk_scale: false,
            pairs_per_epoch: 60_000,
            eval_pairs: 2_000,
            optimizer: AdamW::default(),
            architecture: model.default_config(),
        }
    }

    /// Same schedule, 20 epochs.
    pub fn desk_scale(model: ModelKind) -> Self {
        Self {
            epochs: 20,
            desk_scale: true,
            ..Self::full(model)
        }
    }

    /// Checkpoint metadata after `epochs_run` epochs.
    pub fn meta(&self, epochs_run: usize) -> TrainingMeta {
        TrainingMeta {
            model: self.model.as_str().to_string(),
            epochs_run,
            final_lr: self.schedule.at(epochs_run.saturating_sub(1)),
            seed: self.seed,
            batch_size: self.batch_size,
            desk_scale: self.desk_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.schedule.base_lr > 0.0) {
            return Err(Error::Config("base learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.architecture.head != self.model.default_config().head
            || self.architecture.channels_in != self.model.default_config().channels_in
        {
            return Err(Error::Config(format!(
                "architecture head/channels do not match model `{}`",
                self.model.as_str()
            )));
        }
        self.architecture.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub mean_loss: f32,
    pub lr: f32,
    /// `accuracy` for the classifier, `pair_accuracy` for the scorer.
    pub metric: String,
    pub eval_metric: f32,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogEntry>,
}

/// Seeds for the independent random streams of one run.
fn rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let init = ChaCha8Rng::seed_from_u64(seed);
    let mut data = ChaCha8Rng::seed_from_u64(seed);
    data.set_stream(1);
    (init, data)
}

struct Trainer {
    model: Model,
    opt: AdamW,
    state: AdamWState,
}

impl Trainer {
    fn new(config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let model = Model::new(config.architecture.clone(), rng)?;
        let state = AdamWState::new(model.params.tensors());
        Ok(Self {
            model,
            opt: config.optimizer,
            state,
        })
    }

    /// One optimiser step on a patch batch; `loss` builds the scalar loss
    /// from the head node. Returns the loss value.
    fn step(
        &mut self,
        patches: Tensor,
        lr: f32,
        loss: impl FnOnce(&mut Graph, crate::graph::Var) -> Result<crate::graph::Var>,
    ) -> Result<f32> {
        let mut g = Graph::new();
        let vars = self.model.params.bind(&mut g, true);
        let x = g.constant(patches);
        let fwd = forward_patches(&mut g, &self.model.config, &vars, x)?;
        let l = loss(&mut g, fwd.head)?;
        let value = g.value(l).item();
        if !value.is_finite() {
            return Ok(value);
        }
        g.backward(l)?;
        let grads: Vec<Vec<f32>> = vars
            .iter()
            .map(|&v| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
            .collect();
        self.opt
            .step(self.model.params.tensors_mut(), &grads, &mut self.state, lr)?;
        Ok(value)
    }
}


/// Fraction of `images` whose arg-max logit equals the label.
pub fn classifier_accuracy(model: &Model, images: &[LabeledImage]) -> Result<f32> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let logits = model.classify_batch(images)?;
    let correct = logits
        .iter()
        .zip(images)
        .filter(|(l, img)| argmax(l) == img.label as usize)
        .count();
    Ok(correct as f32 / images.len() as f32)
}

/// Index of the largest logit as a class label.
pub fn argmax_label(v: &[f32]) -> u8 {
    argmax(v) as u8
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Pair accuracy at the 0.5 threshold.
pub fn pair_accuracy(model: &Model, images: &[LabeledImage], pairs: &[PairSample]) -> Result<f32> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let inputs = pairs
        .iter()
        .map(|p| stack_channels(&images[p.query].pixels, &images[p.reference].pixels))
        .collect::<Result<Vec<_>>>()?;
    let scores = model.infer(&inputs, false)?.outputs;
    let correct = scores
        .iter()
        .zip(pairs)
        .filter(|(s, p)| (s[0] >= 0.5) == p.same_class)
        .count();
    Ok(correct as f32 / pairs.len() as f32)
}

/// Deterministic held-out pairs for monitoring the scorer.
pub fn held_out_pairs(images: &[LabeledImage], count: usize, seed: u64) -> Result<Vec<PairSample>> {
    let table = class_index_table(images);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    (0..count).map(|_| sample_pair(&mut rng, &table)).collect()
}

/// Trains the ten-way classifier with softmax cross-entropy over shuffled
/// mini-batches of `train`, scoring `eval` after each epoch. `on_epoch` sees
/// every log entry together with the current model.
pub fn train_vit(
    config: &TrainConfig,
    train: &[LabeledImage],
    eval: &[LabeledImage],
    mut on_epoch: impl FnMut(&TrainLogEntry, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    if config.model != ModelKind::Vit {
        return Err(Error::Config("train_vit needs model = vit".into()));
    }
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let (mut init_rng, mut data_rng) = rngs(config.seed);
    let mut trainer = Trainer::new(config, &mut init_rng)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = config.schedule.at(epoch);
        order.shuffle(&mut data_rng);
        let mut total = 0.0f64;
        let mut steps = 0;
        for batch in order.chunks(config.batch_size) {
            let images: Vec<&[f32]> = batch.iter().map(|&i| train[i].pixels.as_slice()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label as usize).collect();
            let patches = trainer.model.patch_batch(&images)?;
            let loss = trainer.step(patches, lr, |g, head| g.softmax_ce_loss(head, &labels))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step: steps, loss });
            }
            total += loss as f64;
            steps += 1;
        }
        let entry = TrainLogEntry {
            epoch,
            mean_loss: (total / steps as f64) as f32,
            lr,
            metric: "accuracy".into(),
            eval_metric: classifier_accuracy(&trainer.model, eval)?,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry, &trainer.model)?;
        log.push(entry);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(trainer.model, config.meta(config.epochs)),
        log,
    })
}

/// Trains the pairwise scorer with binary cross-entropy on freshly sampled
/// 50/50 same/different pairs each epoch.
pub fn train_cevit(
    config: &TrainConfig,
    train: &[LabeledImage],
    eval: &[LabeledImage],
    mut on_epoch: impl FnMut(&TrainLogEntry, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    if config.model != ModelKind::Cevit {
        return Err(Error::Config("train_cevit needs model = cevit".into()));
    }
    config.validate()?;
    let table = class_index_table(train);
    let eval_pairs = if eval.is_empty() {
        Vec::new()
    } else {
        held_out_pairs(eval, config.eval_pairs, config.seed)?
    };
    let (mut init_rng, mut data_rng) = rngs(config.seed);
    let mut trainer = Trainer::new(config, &mut init_rng)?;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = config.schedule.at(epoch);
        let pairs = (0..config.pairs_per_epoch)
            .map(|_| sample_pair(&mut data_rng, &table))
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0f64;
        let mut steps = 0;
        for batch in pairs.chunks(config.batch_size) {
            let inputs = batch
                .iter()
                .map(|p| stack_channels(&train[p.query].pixels, &train[p.reference].pixels))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<f32> = batch.iter().map(|p| if p.same_class { 1.0 } else { 0.0 }).collect();
            let patches = trainer.model.patch_batch(&inputs)?;
            let loss = trainer.step(patches, lr, |g, head| {
                let s = g.sigmoid(head);
                g.bce_loss(s, &labels)
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step: steps, loss });
            }
            total += loss as f64;
            steps += 1;
        }
        let entry = TrainLogEntry {
            epoch,
            mean_loss: (total / steps.max(1) as f64) as f32,
            lr,
            metric: "pair_accuracy".into(),
            eval_metric: pair_accuracy(&trainer.model, eval, &eval_pairs)?,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry, &trainer.model)?;
        log.push(entry);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(trainer.model, config.meta(config.epochs)),
        log,
    })
}

/// Dispatches on `config.model`.
pub fn train(
    config: &TrainConfig,
    train_set: &[LabeledImage],
    eval: &[LabeledImage],
    on_epoch: impl FnMut(&TrainLogEntry, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    match config.model {
        ModelKind::Vit => train_vit(config, train_set, eval, on_epoch),
        ModelKind::Cevit => train_cevit(config, train_set, eval, on_epoch),
    }
}
