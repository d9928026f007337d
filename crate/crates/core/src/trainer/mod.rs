//! Training with per-epoch label ensembling, inference and fold splitting.
//!
//! Each case starts from its pseudo mask as label. Every epoch visits the
//! cases once in a seeded order, takes one optimiser step per case against
//! the case's current label, and afterwards blends the predictions recorded
//! during the epoch into the labels with an exponential moving average.

mod folds;
mod loss;
mod optim;

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use folds::make_folds;
pub use loss::{dice_loss, dice_loss_value, ema_update, ema_values};
pub use optim::{lr_schedule, sgd_step, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::autodiff::checkpoint::{load_tensors, save_tensors};
use crate::autodiff::{Graph, Tensor};
use crate::ba_unet::{ArchConfig, BaUnet};
use crate::error::{Error, Result};
use crate::volume::{load_volume, save_volume, write_json, SoftLabelVolume, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub adam_epochs: usize,
    pub sgd_epochs: usize,
    pub adam_lr: f64,
    pub sgd_lr_initial: f64,
    pub lr_decay_rate: f64,
    pub lr_decayed_step: u64,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            epsilon: 1e-7,
            adam_epochs: 3,
            sgd_epochs: 17,
            adam_lr: 1e-4,
            sgd_lr_initial: 1e-3,
            lr_decay_rate: 0.94,
            lr_decayed_step: 100,
            batch_size: 1,
            folds: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("alpha", "must lie in (0, 1]"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be positive"));
        }
        if !(self.lr_decay_rate > 0.0 && self.lr_decay_rate <= 1.0) {
            return Err(Error::invalid("lr_decay_rate", "must lie in (0, 1]"));
        }
        if self.lr_decayed_step == 0 {
            return Err(Error::invalid("lr_decayed_step", "must be at least 1"));
        }
        if self.batch_size != 1 {
            return Err(Error::invalid("batch_size", "only batches of one sample are supported"));
        }
        if !(self.adam_lr >= 0.0 && self.sgd_lr_initial >= 0.0) {
            return Err(Error::invalid("adam_lr", "learning rates must be non-negative"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.adam_epochs + self.sgd_epochs
    }

    /// Learning rate of the `step`-th SGD step, counted from zero.
    pub fn sgd_lr(&self, step: u64) -> f64 {
        lr_schedule(step, self.sgd_lr_initial, self.lr_decay_rate, self.lr_decayed_step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Adam,
    Sgd,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Adam => "adam",
            Phase::Sgd => "sgd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,phase,mean_loss,lr";

pub fn format_log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for e in log {
        writeln!(out, "{},{},{:.6},{:e}", e.epoch, e.phase.as_str(), e.mean_loss, e.lr).unwrap();
    }
    out
}

/// One training volume with its initial label.
#[derive(Clone, Debug)]
pub struct TrainCase {
    pub id: String,
    /// Normalised intensities.
    pub image: Volume,
    pub pseudo_mask: SoftLabelVolume,
}

/// Current label of every case and the number of completed blends.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleState {
    pub epoch: usize,
    pub labels: Vec<SoftLabelVolume>,
}

/// `1 x 1 x S x H x W` tensor of a normalised volume.
pub fn volume_tensor(vol: &Volume) -> Result<Tensor<f32>> {
    let s = vol.shape();
    Tensor::new([1, 1, s.slices, s.rows, s.cols], vol.as_normalized()?.to_vec())
}

/// Probability map of a normalised volume.
pub fn infer(model: &BaUnet<f32>, vol: &Volume) -> Result<SoftLabelVolume> {
    let y = model.predict(&volume_tensor(vol)?)?;
    SoftLabelVolume::new(vol.shape(), y.into_data())
}

const STATE_FILE: &str = "train_state.json";
const ENSEMBLE_DIR: &str = "ensemble";
const OPTIMIZER_DIR: &str = "optimizer";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Serialize, Deserialize)]
struct SavedState {
    config: TrainConfig,
    case_ids: Vec<String>,
    epochs_done: usize,
    sgd_steps: u64,
    adam_steps: u64,
    log: Vec<EpochLog>,
}

/// A training run that can be advanced epoch by epoch and checkpointed.
pub struct Trainer {
    cfg: TrainConfig,
    model: BaUnet<f32>,
    case_ids: Vec<String>,
    ensemble: EnsembleState,
    adam: Adam,
    sgd_steps: u64,
    log: Vec<EpochLog>,
}

impl Trainer {
    /// Starts from `model` with every case's pseudo mask as its label.
    pub fn new(model: BaUnet<f32>, cases: &[TrainCase], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_cases(&model, cases)?;
        let sizes: Vec<usize> = model.params().trainable_ids().iter().map(|&id| model.params().get(id).len()).collect();
        Ok(Self {
            cfg: cfg.clone(),
            case_ids: cases.iter().map(|c| c.id.clone()).collect(),
            ensemble: EnsembleState { epoch: 0, labels: cases.iter().map(|c| c.pseudo_mask.clone()).collect() },
            adam: Adam::new(&sizes),
            sgd_steps: 0,
            log: Vec::new(),
            model,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &BaUnet<f32> {
        &self.model
    }

    pub fn ensemble(&self) -> &EnsembleState {
        &self.ensemble
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn epochs_done(&self) -> usize {
        self.ensemble.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done() >= self.cfg.total_epochs()
    }

    pub fn into_parts(self) -> (BaUnet<f32>, Vec<EpochLog>, EnsembleState) {
        (self.model, self.log, self.ensemble)
    }

    fn check_same_cases(&self, cases: &[TrainCase]) -> Result<()> {
        if cases.len() != self.case_ids.len() || cases.iter().zip(&self.case_ids).any(|(c, id)| &c.id != id) {
            return Err(Error::invalid("cases", "case list differs from the one this run started with"));
        }
        Ok(())
    }

    /// Runs one epoch and blends its predictions into the labels.
    pub fn run_epoch(&mut self, cases: &[TrainCase]) -> Result<&EpochLog> {
        self.check_same_cases(cases)?;
        let epoch = self.epochs_done();
        if epoch >= self.cfg.total_epochs() {
            return Err(Error::invalid("epochs", "training already finished"));
        }
        let phase = if epoch < self.cfg.adam_epochs { Phase::Adam } else { Phase::Sgd };
        let mut order: Vec<usize> = (0..cases.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let ids = self.model.params().trainable_ids();
        let mut predictions: Vec<Option<Vec<f32>>> = vec![None; cases.len()];
        let mut loss_sum = 0.0;
        let mut first_lr = None;
        for &i in &order {
            let (loss, pred, grads) = {
                let mut g = Graph::new();
                let p = self.model.params().bind(&mut g);
                let x = g.constant(volume_tensor(&cases[i].image)?);
                let y = self.model.forward(&mut g, &p, x)?;
                let loss = dice_loss(&mut g, y, self.ensemble.labels[i].data(), self.cfg.epsilon)?;
                g.backward(loss)?;
                let grads = ids.iter().map(|&id| g.grad_of(p.var(id)).map(<[f32]>::to_vec)).collect::<Result<Vec<_>>>()?;
                (g.value(loss).data()[0] as f64, g.value(y).data().to_vec(), grads)
            };
            loss_sum += loss;
            predictions[i] = Some(pred);
            let lr = match phase {
                Phase::Adam => {
                    self.adam.begin_step();
                    for (k, (&id, grad)) in ids.iter().zip(&grads).enumerate() {
                        self.adam.update(k, self.model.params_mut().get_mut(id).data_mut(), grad, self.cfg.adam_lr)?;
                    }
                    self.cfg.adam_lr
                }
                Phase::Sgd => {
                    let lr = self.cfg.sgd_lr(self.sgd_steps);
                    for (&id, grad) in ids.iter().zip(&grads) {
                        sgd_step(self.model.params_mut().get_mut(id).data_mut(), grad, lr)?;
                    }
                    self.sgd_steps += 1;
                    lr
                }
            };
            first_lr.get_or_insert(lr);
        }

        for (label, pred) in self.ensemble.labels.iter_mut().zip(predictions) {
            let pred = SoftLabelVolume::new(label.shape(), pred.expect("every case visited once"))?;
            *label = ema_update(label, &pred, self.cfg.alpha)?;
        }
        self.ensemble.epoch += 1;
        let entry = EpochLog {
            epoch: epoch + 1,
            phase,
            mean_loss: loss_sum / cases.len() as f64,
            lr: first_lr.unwrap_or(0.0),
        };
        info!("epoch {} ({}) mean loss {:.5} lr {:e}", entry.epoch, phase.as_str(), entry.mean_loss, entry.lr);
        self.log.push(entry);
        Ok(self.log.last().unwrap())
    }

    /// Runs the remaining epochs, calling `after_epoch` after each one.
    pub fn run_with(&mut self, cases: &[TrainCase], mut after_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch(cases)?;
            after_epoch(self)?;
        }
        Ok(())
    }

    pub fn run(&mut self, cases: &[TrainCase]) -> Result<()> {
        self.run_with(cases, |_| Ok(()))
    }

    /// Writes the model, the current labels, optimiser state and the log.
    /// `spacing_mm` is recorded in the label headers.
    pub fn save(&self, dir: impl AsRef<Path>, spacing_mm: [f64; 3]) -> Result<()> {
        let dir = dir.as_ref();
        self.model.save(dir)?;
        let ens_dir = dir.join(ENSEMBLE_DIR);
        std::fs::create_dir_all(&ens_dir).map_err(|e| Error::io(&ens_dir, e))?;
        for (id, label) in self.case_ids.iter().zip(&self.ensemble.labels) {
            save_volume(&label.to_volume(spacing_mm)?, ens_dir.join(format!("{id}.json")))?;
        }
        let moments: Vec<(String, Tensor<f32>)> = self
            .adam
            .m
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("m{i}"), m))
            .chain(self.adam.v.iter().enumerate().map(|(i, v)| (format!("v{i}"), v)))
            .map(|(name, data)| Tensor::new([data.len()], data.clone()).map(|t| (name, t)))
            .collect::<Result<_>>()?;
        let named: Vec<(String, &Tensor<f32>)> = moments.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_tensors(dir.join(OPTIMIZER_DIR), &named)?;
        let state = SavedState {
            config: self.cfg.clone(),
            case_ids: self.case_ids.clone(),
            epochs_done: self.epochs_done(),
            sgd_steps: self.sgd_steps,
            adam_steps: self.adam.t,
            log: self.log.clone(),
        };
        write_json(&dir.join(STATE_FILE), &state)?;
        let log_path = dir.join(LOG_FILE);
        std::fs::write(&log_path, format_log_csv(&self.log)).map_err(|e| Error::io(&log_path, e))
    }

    /// Restores a run written by [`save`](Self::save). `cases` must list the
    /// same case ids in the same order.
    pub fn resume(dir: impl AsRef<Path>, cases: &[TrainCase]) -> Result<Self> {
        let dir = dir.as_ref();
        let state_path = dir.join(STATE_FILE);
        let text = std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let state: SavedState = serde_json::from_str(&text).map_err(|e| Error::json(&state_path, e))?;
        let model = BaUnet::<f32>::load(dir)?;
        let mut trainer = Self::new(model, cases, &state.config)?;
        trainer.case_ids = state.case_ids;
        trainer.check_same_cases(cases)?;
        for (id, label) in trainer.case_ids.iter().zip(trainer.ensemble.labels.iter_mut()) {
            *label = SoftLabelVolume::from_volume(&load_volume(dir.join(ENSEMBLE_DIR).join(format!("{id}.json")))?)?;
        }
        let tensors = load_tensors::<f32>(dir.join(OPTIMIZER_DIR))?;
        let n = trainer.adam.m.len();
        if tensors.len() != 2 * n {
            return Err(Error::ShapeMismatch(format!("optimizer state has {} tensors, expected {}", tensors.len(), 2 * n)));
        }
        for (i, (_, t)) in tensors.into_iter().enumerate() {
            let slot = if i < n { &mut trainer.adam.m[i] } else { &mut trainer.adam.v[i - n] };
            if slot.len() != t.len() {
                return Err(Error::LengthMismatch { expected: slot.len(), found: t.len() });
            }
            *slot = t.into_data();
        }
        trainer.adam.t = state.adam_steps;
        trainer.sgd_steps = state.sgd_steps;
        trainer.ensemble.epoch = state.epochs_done;
        trainer.log = state.log;
        Ok(trainer)
    }
}

fn check_cases(model: &BaUnet<f32>, cases: &[TrainCase]) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::Empty("training case list"));
    }
    for c in cases {
        if c.image.shape() != c.pseudo_mask.shape() {
            return Err(Error::ShapeMismatch(format!(
                "case {}: image {} vs label {}",
                c.id,
                c.image.shape(),
                c.pseudo_mask.shape()
            )));
        }
        c.image.as_normalized()?;
        let s = c.image.shape();
        model.check_input(&[1, 1, s.slices, s.rows, s.cols])?;
    }
    Ok(())
}

/// Result of a complete training run.
pub struct TrainOutcome {
    pub model: BaUnet<f32>,
    pub log: Vec<EpochLog>,
    pub ensemble: EnsembleState,
}

/// Trains a freshly initialised network (weights seeded by `cfg.seed`).
pub fn train(cases: &[TrainCase], cfg: &TrainConfig, arch: &ArchConfig) -> Result<TrainOutcome> {
    train_from(BaUnet::new(arch.clone(), cfg.seed)?, cases, cfg)
}

pub fn train_from(model: BaUnet<f32>, cases: &[TrainCase], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, cases, cfg)?;
    trainer.run(cases)?;
    let (model, log, ensemble) = trainer.into_parts();
    Ok(TrainOutcome { model, log, ensemble })
}
