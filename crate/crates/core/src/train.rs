//! Training loops for the dehazing network and the haze generator, with
//! checkpoint conversion and JSON-lines step logs.
//!
//! All randomness is derived from the run seed and the step (or epoch)
//! index, so a run resumed from a checkpoint continues exactly where it
//! stopped.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::{ExtractorKind, RunConfig};
use crate::datapipe::{random_crop_resize, sample_training_item, PairedDataset, TrainingItem};
use crate::dhr::DhrModel;
use crate::error::{Error, Result};
use crate::hazegen::{AhgLossRecord, AhgModel, AhgTrainer};
use crate::image_io::image_to_tensor;
use crate::losses::{joint_loss, ContrastBatch, FeatureExtractor, RandomConvExtractor, Vgg16Extractor};
use crate::metrics::EvalReport;
use crate::nn::{cosine_lr, Adam};
use crate::tensor_ops::all_finite;

/// Training runs in single precision.
pub const TRAIN_DTYPE: DType = DType::F32;

const EPOCH_STREAM: u64 = 1 << 32;
const STEP_STREAM: u64 = 2 << 32;

/// Deterministic per-epoch shuffle of `0..len`.
pub fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EPOCH_STREAM + epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Generator for everything drawn while building the batch of `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STEP_STREAM + step);
    rng
}

/// Dataset indices of the batch at 0-based `step`: epochs are shuffled
/// independently and the last batch of an epoch may be short.
pub fn batch_indices(seed: u64, step: u64, len: usize, batch_size: usize) -> (u64, Vec<usize>) {
    let per_epoch = len.div_ceil(batch_size) as u64;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize * batch_size;
    let order = epoch_order(seed, epoch, len);
    (epoch, order[pos..(pos + batch_size).min(len)].to_vec())
}

pub fn build_extractor(config: &RunConfig, device: &Device) -> Result<Box<dyn FeatureExtractor>> {
    let e = &config.extractor;
    Ok(match e.kind {
        ExtractorKind::Random => Box::new(RandomConvExtractor::new(&e.widths, e.seed, TRAIN_DTYPE, device)?),
        ExtractorKind::Vgg16 => {
            let path = e
                .weights
                .as_ref()
                .ok_or_else(|| Error::Config("extractor kind `vgg16` needs `extractor.weights`".into()))?;
            Box::new(Vgg16Extractor::load(path, TRAIN_DTYPE, device)?)
        }
    })
}

/// Appends one JSON object per line.
pub struct JsonlLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlLog {
    pub fn open(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
        })
    }

    pub fn write(&mut self, record: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// A collated batch: inputs, targets and, per negative slot, the stacked negatives.
pub struct Batch {
    pub input: Tensor,
    pub target: Tensor,
    pub negatives: Vec<Tensor>,
    pub weights: Vec<f64>,
    pub generated: usize,
}

impl Batch {
    pub fn collate(items: &[TrainingItem]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot collate an empty batch".into()))?;
        if items.iter().any(|it| it.weights != first.weights) {
            return Err(Error::InvalidInput("batch items disagree on negative weights".into()));
        }
        let cat = |f: &dyn Fn(&TrainingItem) -> &Tensor| -> Result<Tensor> {
            Ok(Tensor::cat(&items.iter().map(f).collect::<Vec<_>>(), 0)?)
        };
        let negatives = (0..first.negatives.len())
            .map(|k| cat(&|it| &it.negatives[k]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input: cat(&|it| &it.input)?,
            target: cat(&|it| &it.target)?,
            negatives,
            weights: first.weights.clone(),
            generated: items.iter().filter(|it| it.generated).count(),
        })
    }
}

/// One line of the dehazing training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhrStepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub total: f64,
    pub smooth_l1: f64,
    pub ms_ssim: f64,
    pub mncd: f64,
    pub generated: usize,
}

pub struct DhrTrainer {
    pub model: DhrModel,
    pub config: RunConfig,
    optimizer: Adam,
    extractor: Box<dyn FeatureExtractor>,
    epoch: u64,
    history: Vec<serde_json::Value>,
}

impl DhrTrainer {
    pub fn new(config: RunConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let model = DhrModel::new(config.dhr.clone(), TRAIN_DTYPE, device, config.seed)?;
        let optimizer = Adam::new(
            model.params().named_vars(),
            crate::nn::AdamConfig {
                lr: config.train.lr_max,
                ..Default::default()
            },
        )?;
        let extractor = build_extractor(&config, device)?;
        Ok(Self {
            model,
            config,
            optimizer,
            extractor,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Rebuilds the trainer from a checkpoint, including optimizer state and counters.
    pub fn from_checkpoint(ckpt: &Checkpoint, device: &Device) -> Result<Self> {
        if ckpt.header.kind != CheckpointKind::Dhr {
            return Err(Error::Checkpoint(format!("expected a dhr checkpoint, got {:?}", ckpt.header.kind)));
        }
        let mut trainer = Self::new(ckpt.header.config.clone(), device)?;
        trainer.model.params().load(&ckpt.model)?;
        trainer.optimizer.load_state(&ckpt.optimizer, ckpt.header.step)?;
        trainer.epoch = ckpt.header.epoch;
        trainer.history = ckpt.header.history.clone();
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(CheckpointKind::Dhr, self.config.clone());
        ckpt.header.step = self.step();
        ckpt.header.epoch = self.epoch;
        ckpt.header.history = self.history.clone();
        ckpt.model = self.model.params().snapshot();
        ckpt.optimizer = self.optimizer.state();
        ckpt
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.optimizer.step_count()
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(self.config.train.batch_size) as u64
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        let t = &self.config.train;
        t.max_steps
            .unwrap_or(t.epochs as u64 * self.steps_per_epoch(dataset_len))
    }

    /// Learning rate applied by the update that follows `step` completed steps.
    pub fn learning_rate_at(&self, step: u64, total_steps: u64) -> f64 {
        let t = &self.config.train;
        cosine_lr(step as usize, total_steps.saturating_sub(1) as usize, t.lr_max, t.lr_min)
    }

    pub fn history(&self) -> &[serde_json::Value] {
        &self.history
    }

    /// One joint-loss update on a collated batch at the given learning rate.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<crate::losses::LossRecord> {
        let pred = self.model.forward(&batch.input)?;
        let contrast = if self.config.loss.mncd != 0.0 && !batch.negatives.is_empty() {
            Some(ContrastBatch::new(
                pred.clone(),
                batch.target.clone(),
                batch.negatives.clone(),
                batch.weights.clone(),
            )?)
        } else {
            None
        };
        let loss = joint_loss(&pred, &batch.target, contrast.as_ref(), self.extractor.as_ref(), &self.config.loss)?;
        let step = self.step() + 1;
        if !loss.record.total.is_finite() {
            return Err(Error::NonFinite(format!("joint loss at step {step}: {:?}", loss.record)));
        }
        let grads = loss.total.backward()?;
        for (name, var) in self.model.params().named_vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                if !all_finite(g)? {
                    return Err(Error::NonFinite(format!("gradient of `{name}` at step {step}")));
                }
            }
        }
        self.optimizer.set_learning_rate(lr);
        self.optimizer.step(&grads)?;
        Ok(loss.record)
    }

    /// Samples and applies the batch for the next step of a run over `dataset`.
    pub fn advance(&mut self, dataset: &PairedDataset, ahg: Option<&AhgModel>) -> Result<DhrStepLog> {
        let step = self.step();
        let total = self.total_steps(dataset.len());
        let t = &self.config.train;
        let (epoch, indices) = batch_indices(self.config.seed, step, dataset.len(), t.batch_size);
        let total_epochs = total.div_ceil(self.steps_per_epoch(dataset.len())) as usize;
        let ahg = ahg.filter(|_| t.use_ahg);
        let mut rng = step_rng(self.config.seed, step);
        let device = self.model.params().device().clone();
        let items = indices
            .iter()
            .map(|&i| {
                sample_training_item(
                    epoch as usize,
                    total_epochs,
                    dataset,
                    i,
                    ahg,
                    &self.config.sampling,
                    &mut rng,
                    &device,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::collate(&items)?;
        let lr = self.learning_rate_at(step, total);
        let record = self.train_step(&batch, lr)?;
        self.epoch = epoch;
        let log = DhrStepLog {
            step: step + 1,
            epoch,
            lr,
            total: record.total,
            smooth_l1: record.smooth_l1,
            ms_ssim: record.ms_ssim,
            mncd: record.mncd,
            generated: batch.generated,
        };
        self.history.push(serde_json::to_value(log)?);
        Ok(log)
    }

    /// Runs until the configured step budget is spent. `on_step` sees every log line.
    pub fn run(
        &mut self,
        dataset: &PairedDataset,
        ahg: Option<&AhgModel>,
        mut on_step: impl FnMut(&DhrStepLog, &Self) -> Result<()>,
    ) -> Result<()> {
        if self.config.train.use_ahg && ahg.is_none() {
            log::warn!("no haze generator given: augmentation and generated negatives are disabled");
        }
        let total = self.total_steps(dataset.len());
        while self.step() < total {
            let log = self.advance(dataset, ahg)?;
            on_step(&log, self)?;
        }
        Ok(())
    }
}

pub fn load_dhr(path: impl AsRef<Path>, device: &Device) -> Result<(DhrModel, Checkpoint)> {
    let ckpt = Checkpoint::load_kind(path, CheckpointKind::Dhr, device)?;
    let config = &ckpt.header.config;
    let model = DhrModel::new(config.dhr.clone(), TRAIN_DTYPE, device, config.seed)?;
    model.params().load(&ckpt.model)?;
    Ok((model, ckpt))
}

/// Runs the model over every pair at full resolution and scores it against the clear images.
pub fn evaluate_dhr(model: &DhrModel, dataset: &PairedDataset) -> Result<EvalReport> {
    let device = model.params().device().clone();
    let mut report = EvalReport::default();
    for (i, name) in dataset.names().iter().enumerate() {
        let (hazy, clear) = dataset.load_pair(i, &device)?;
        let pred = model.forward(&hazy.to_dtype(TRAIN_DTYPE)?)?;
        report.push(name.clone(), &pred, &clear)?;
    }
    Ok(report)
}

const GEN_PREFIX: &str = "gen.";
const CRITIC_PREFIX: &str = "critic.";

fn with_prefix(prefix: &str, map: std::collections::BTreeMap<String, Tensor>) -> impl Iterator<Item = (String, Tensor)> + '_ {
    map.into_iter().map(move |(k, v)| (format!("{prefix}{k}"), v))
}

fn strip_prefix(prefix: &str, map: &std::collections::BTreeMap<String, Tensor>) -> std::collections::BTreeMap<String, Tensor> {
    map.iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
        .collect()
}

pub struct AhgRun {
    pub trainer: AhgTrainer,
    pub config: RunConfig,
    history: Vec<serde_json::Value>,
}

impl AhgRun {
    pub fn new(config: RunConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let model = AhgModel::new(config.ahg.clone(), TRAIN_DTYPE, device, config.seed)?;
        Ok(Self {
            trainer: AhgTrainer::new(model)?,
            config,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, device: &Device) -> Result<Self> {
        if ckpt.header.kind != CheckpointKind::Ahg {
            return Err(Error::Checkpoint(format!("expected an ahg checkpoint, got {:?}", ckpt.header.kind)));
        }
        let mut run = Self::new(ckpt.header.config.clone(), device)?;
        let model = &run.trainer.model;
        model.generator_params().load(&strip_prefix(GEN_PREFIX, &ckpt.model))?;
        model.critic_params().load(&strip_prefix(CRITIC_PREFIX, &ckpt.model))?;
        run.trainer.load_optimizer_state(&ckpt.optimizer, ckpt.header.step)?;
        run.history = ckpt.header.history.clone();
        Ok(run)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let model = &self.trainer.model;
        let mut ckpt = Checkpoint::new(CheckpointKind::Ahg, self.config.clone());
        ckpt.header.step = self.trainer.step_count();
        ckpt.header.history = self.history.clone();
        ckpt.model = with_prefix(GEN_PREFIX, model.generator_params().snapshot())
            .chain(with_prefix(CRITIC_PREFIX, model.critic_params().snapshot()))
            .collect();
        ckpt.optimizer = self.trainer.optimizer_state();
        ckpt
    }

    pub fn step(&self) -> u64 {
        self.trainer.step_count()
    }

    pub fn history(&self) -> &[serde_json::Value] {
        &self.history
    }

    /// One generator/critic update on the next batch of crops.
    pub fn advance(&mut self, dataset: &PairedDataset) -> Result<AhgLossRecord> {
        let step = self.step();
        let cfg = &self.config.ahg_train;
        let (_, indices) = batch_indices(self.config.seed, step, dataset.len(), cfg.batch_size);
        let mut rng = step_rng(self.config.seed, step);
        let device = self.trainer.model.generator_params().device().clone();
        let mut clear = Vec::with_capacity(indices.len());
        let mut hazy = Vec::with_capacity(indices.len());
        for &i in &indices {
            let (h, c) = dataset.load_images(i)?;
            let (h, c, _) = random_crop_resize(&h, &c, &cfg.crop, &mut rng)?;
            hazy.push(image_to_tensor(&h, &device)?);
            clear.push(image_to_tensor(&c, &device)?);
        }
        let record = self
            .trainer
            .train_step(&Tensor::cat(&clear, 0)?, &Tensor::cat(&hazy, 0)?)?;
        self.history.push(serde_json::to_value(record)?);
        Ok(record)
    }

    pub fn run(
        &mut self,
        dataset: &PairedDataset,
        steps: u64,
        mut on_step: impl FnMut(&AhgLossRecord, &Self) -> Result<()>,
    ) -> Result<()> {
        while self.step() < steps {
            let record = self.advance(dataset)?;
            on_step(&record, self)?;
        }
        Ok(())
    }
}

pub fn load_ahg(path: impl AsRef<Path>, device: &Device) -> Result<AhgModel> {
    let ckpt = Checkpoint::load_kind(path, CheckpointKind::Ahg, device)?;
    let config = &ckpt.header.config;
    let model = AhgModel::new(config.ahg.clone(), TRAIN_DTYPE, device, config.seed)?;
    model.generator_params().load(&strip_prefix(GEN_PREFIX, &ckpt.model))?;
    model.critic_params().load(&strip_prefix(CRITIC_PREFIX, &ckpt.model))?;
    Ok(model)
}
