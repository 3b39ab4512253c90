//! Optimisation: Adam, the plateau schedule, the epoch loop and checkpoints.

mod adam;
mod checkpoint;
mod schedule;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    load_model, model_checkpoint, model_from_checkpoint, read_model_config, save_model, write_model_config, Checkpoint, MAGIC, VERSION,
};
pub use schedule::{Schedule, ScheduleEvent};

use crate::data::{DataError, Dataset};
use crate::model::{shuffle_ordering, DeformerModel, ModelError, OrderedSample};
use crate::numerics::{Float, NumericsError, ParamStore, Tape};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("NaN gradient in parameter {0}")]
    NanGradient(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: Float },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Io(String),
    #[error("invalid training config: {0}")]
    Config(String),
}

impl TrainError {
    /// Whether the failure is numerical (NaN/inf) rather than configuration or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(self, TrainError::NanGradient(_) | TrainError::NonFiniteLoss { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stale validation epochs before the single learning-rate drop.
    pub patience: usize,
    pub adam: AdamConfig,
    /// Rescale the gradient to at most this norm.
    pub clip_norm: Option<Float>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn paper_images() -> Self {
        Self {
            batch_size: 1,
            max_epochs: 1000,
            patience: 5,
            adam: AdamConfig::paper(),
            clip_norm: None,
            seed: 0,
        }
    }

    pub fn paper_tabular() -> Self {
        Self {
            batch_size: 128,
            patience: 20,
            ..Self::paper_images()
        }
    }

    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            adam: AdamConfig::desk(),
            clip_norm: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !(self.adam.lr >= 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return Err(TrainError::Config(format!("invalid Adam settings {:?}", self.adam)));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(TrainError::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: Float,
    pub val_nll: Float,
    pub lr: Float,
    pub seconds: f64,
    pub event: ScheduleEvent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

pub const LOG_HEADER: &str = "epoch,train_nll,val_nll,lr,seconds";

/// Mean NLL per sample with one fixed seeded ordering per sample.
pub fn validation_nll(model: &DeformerModel, data: &Dataset, seed: u64) -> Result<Float, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("validation set is empty".into()));
    }
    let mut rng = seeds::substream(seed, seeds::ORDERING, 0);
    let d = data.num_features();
    let mut total = 0.0;
    let chunk = (4096 / d).clamp(1, 64);
    for start in (0..data.len()).step_by(chunk) {
        let samples = (start..(start + chunk).min(data.len()))
            .map(|i| OrderedSample::new(model.layout(), &data.row(i), shuffle_ordering(d, &mut rng)?))
            .collect::<Result<Vec<_>, _>>()?;
        total += model.nll_batch(&samples)?.iter().sum::<Float>();
    }
    Ok(total / data.len() as Float)
}

/// Training state: model, optimiser, schedule, RNG streams and the best parameters seen.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: DeformerModel,
    config: TrainConfig,
    adam: AdamState,
    schedule: Schedule,
    epoch: usize,
    data_rng: ChaCha8Rng,
    ordering_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    best: Option<ParamStore>,
    history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(model: DeformerModel, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Self {
            adam: AdamState::new(config.adam, model.params()),
            schedule: Schedule::new(config.patience),
            epoch: 0,
            data_rng: seeds::stream(config.seed, seeds::DATA),
            ordering_rng: seeds::stream(config.seed, seeds::ORDERING),
            dropout_rng: seeds::stream(config.seed, seeds::DROPOUT),
            best: None,
            history: Vec::new(),
            model,
            config,
        })
    }

    pub fn model(&self) -> &DeformerModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn lr(&self) -> Float {
        self.adam.config.lr
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// The model with the best validation parameters seen so far (current parameters if none).
    pub fn best_model(&self) -> DeformerModel {
        let mut m = self.model.clone();
        if let Some(best) = &self.best {
            for id in best.ids() {
                m.params_mut().get_mut(id).data_mut().copy_from_slice(best.get(id).data());
            }
        }
        m
    }

    /// One gradient step on the samples at `indices`, each under a fresh random ordering; returns the summed NLL.
    fn step(&mut self, data: &Dataset, indices: &[usize], batch_no: usize) -> Result<Float, TrainError> {
        let d = data.num_features();
        let samples = indices
            .iter()
            .map(|&i| OrderedSample::new(self.model.layout(), &data.row(i), shuffle_ordering(d, &mut self.ordering_rng)?))
            .collect::<Result<Vec<_>, _>>()?;
        let use_dropout = self.model.config().transformer.dropout_p > 0.0;
        let (total, grads, vars) = {
            let mut tape = Tape::new();
            let vars = self.model.bind(&mut tape);
            let dropout = if use_dropout { Some(&mut self.dropout_rng as &mut dyn RngCore) } else { None };
            let loss = self.model.batch_loss(&mut tape, &vars, &samples, dropout)?;
            let total: Float = loss.per_sample.iter().sum();
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch: self.epoch + 1, batch: batch_no, loss: total });
            }
            let mean = tape.scale(loss.total, 1.0 / samples.len() as Float);
            (total, tape.backward(mean)?, vars)
        };
        let params = self.model.params_mut();
        params.zero_grads();
        params.accumulate_grads(&grads, &vars);
        if let Some(max) = self.config.clip_norm {
            let norm = params.grad_norm();
            if norm > max {
                params.scale_grads(max / norm);
            }
        }
        self.adam.update(params)?;
        params.zero_grads();
        Ok(total)
    }

    /// Runs one pass over `train` then scores `validation` and updates the schedule.
    pub fn run_epoch(&mut self, train: &Dataset, validation: &Dataset) -> Result<EpochRecord, TrainError> {
        if !train.shape().matches(self.model.layout()) || !validation.shape().matches(self.model.layout()) {
            return Err(TrainError::Config("dataset feature shape does not match the model".into()));
        }
        if train.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.data_rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            total += self.step(train, batch, b + 1)?;
        }
        self.epoch += 1;
        let val_nll = validation_nll(&self.model, validation, self.config.seed)?;
        let event = self.schedule.observe(val_nll, &mut self.adam.config.lr);
        if event == ScheduleEvent::Improved {
            self.best = Some(self.model.params().clone());
        }
        let record = EpochRecord {
            epoch: self.epoch,
            train_nll: total / train.len() as Float,
            val_nll,
            lr: self.adam.config.lr,
            seconds: started.elapsed().as_secs_f64(),
            event,
        };
        self.history.push(record);
        Ok(record)
    }

    /// Trains until `max_epochs` or early stopping, appending to the CSV log and refreshing
    /// `last.ckpt` / `best.ckpt` in `checkpoint_dir` after every epoch.
    pub fn train(&mut self, train: &Dataset, validation: &Dataset, log: Option<&Path>, checkpoint_dir: Option<&Path>) -> Result<StopReason, TrainError> {
        let mut log_file = match log {
            Some(path) => {
                let fresh = !path.exists();
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
                if fresh {
                    writeln!(f, "{LOG_HEADER}").map_err(|e| TrainError::Io(e.to_string()))?;
                }
                Some(f)
            }
            None => None,
        };
        while self.epoch < self.config.max_epochs {
            let r = self.run_epoch(train, validation)?;
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{},{},{},{},{:.3}", r.epoch, r.train_nll, r.val_nll, r.lr, r.seconds).map_err(|e| TrainError::Io(e.to_string()))?;
            }
            if let Some(dir) = checkpoint_dir {
                self.checkpoint().save(&dir.join("last.ckpt"))?;
                if r.event == ScheduleEvent::Improved {
                    model_checkpoint(&self.model).save(&dir.join("best.ckpt"))?;
                }
            }
            if r.event == ScheduleEvent::Stop {
                return Ok(StopReason::EarlyStop);
            }
        }
        Ok(StopReason::MaxEpochs)
    }

    /// Everything needed to resume training exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        write_model_config(&mut ck, self.model.config());
        let c = &self.config;
        ck.set("train.batch_size", c.batch_size);
        ck.set("train.max_epochs", c.max_epochs);
        ck.set("train.patience", c.patience);
        ck.set("train.seed", c.seed);
        ck.set("train.clip_norm", c.clip_norm.map_or("none".to_string(), |v| format!("{v:?}")));
        ck.set("train.epoch", self.epoch);
        let a = &self.adam.config;
        ck.set("adam.lr", format!("{:?}", a.lr));
        ck.set("adam.beta1", format!("{:?}", a.beta1));
        ck.set("adam.beta2", format!("{:?}", a.beta2));
        ck.set("adam.eps", format!("{:?}", a.eps));
        ck.set("adam.step", self.adam.step);
        let s = &self.schedule;
        ck.set("schedule.patience", s.patience);
        ck.set("schedule.stop_patience", s.stop_patience);
        ck.set("schedule.factor", format!("{:?}", s.factor));
        ck.set("schedule.best_validation", format!("{:?}", s.best_validation));
        ck.set("schedule.epochs_since_best", s.epochs_since_best);
        ck.set("schedule.reduced", s.reduced);
        for (name, rng) in [("data", &self.data_rng), ("ordering", &self.ordering_rng), ("dropout", &self.dropout_rng)] {
            let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
            ck.set(&format!("rng.{name}.seed"), seed);
            ck.set(&format!("rng.{name}.stream"), rng.get_stream());
            ck.set(&format!("rng.{name}.word_pos"), rng.get_word_pos());
        }
        ck.set("best.present", self.best.is_some());
        ck.push_store("param/", self.model.params());
        for (prefix, moments) in [("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)] {
            for (id, m) in self.model.params().ids().zip(moments) {
                let t = crate::numerics::Tensor::new(self.model.params().get(id).shape().to_vec(), m.clone()).expect("moment shape");
                ck.blocks.push((format!("{prefix}{}", self.model.params().name(id)), t));
            }
        }
        if let Some(best) = &self.best {
            ck.push_store("best/", best);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let model = checkpoint::restore_model(ck, "param/")?;
        let clip_norm = match ck.get("train.clip_norm")? {
            "none" => None,
            _ => Some(ck.parse("train.clip_norm")?),
        };
        let adam_config = AdamConfig {
            lr: ck.parse("adam.lr")?,
            beta1: ck.parse("adam.beta1")?,
            beta2: ck.parse("adam.beta2")?,
            eps: ck.parse("adam.eps")?,
        };
        let config = TrainConfig {
            batch_size: ck.parse("train.batch_size")?,
            max_epochs: ck.parse("train.max_epochs")?,
            patience: ck.parse("train.patience")?,
            adam: adam_config,
            clip_norm,
            seed: ck.parse("train.seed")?,
        };
        let mut trainer = Trainer::new(model, config)?;
        trainer.epoch = ck.parse("train.epoch")?;
        trainer.adam.step = ck.parse("adam.step")?;
        let params = trainer.model.params();
        for (prefix, moments) in [("adam.m/", &mut trainer.adam.m), ("adam.v/", &mut trainer.adam.v)] {
            for (id, m) in params.ids().zip(moments.iter_mut()) {
                let name = format!("{prefix}{}", params.name(id));
                let t = ck.block(&name).ok_or_else(|| TrainError::Checkpoint(format!("missing block {name:?}")))?;
                if t.numel() != m.len() {
                    return Err(TrainError::Checkpoint(format!("block {name:?} has the wrong size")));
                }
                m.copy_from_slice(t.data());
            }
        }
        trainer.schedule = Schedule {
            patience: ck.parse("schedule.patience")?,
            factor: ck.parse("schedule.factor")?,
            stop_patience: ck.parse("schedule.stop_patience")?,
            best_validation: ck.parse("schedule.best_validation")?,
            epochs_since_best: ck.parse("schedule.epochs_since_best")?,
            reduced: ck.parse("schedule.reduced")?,
        };
        for (name, rng) in [("data", &mut trainer.data_rng), ("ordering", &mut trainer.ordering_rng), ("dropout", &mut trainer.dropout_rng)] {
            let hex = ck.get(&format!("rng.{name}.seed"))?;
            let seed: Vec<u8> = (0..hex.len())
                .step_by(2)
                .map(|i| u8::from_str_radix(hex.get(i..i + 2).unwrap_or("zz"), 16))
                .collect::<Result<_, _>>()
                .map_err(|_| TrainError::Checkpoint(format!("bad RNG seed for {name}")))?;
            let seed: [u8; 32] = seed.try_into().map_err(|_| TrainError::Checkpoint(format!("bad RNG seed length for {name}")))?;
            let mut r = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
            r.set_stream(ck.parse(&format!("rng.{name}.stream"))?);
            r.set_word_pos(ck.parse(&format!("rng.{name}.word_pos"))?);
            *rng = r;
        }
        if ck.parse::<bool>("best.present")? {
            let mut best = trainer.model.params().clone();
            ck.fill_store("best/", &mut best)?;
            trainer.best = Some(best);
        }
        Ok(trainer)
    }
}
