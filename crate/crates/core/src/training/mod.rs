//! Pretraining and fine-tuning loops with early stopping and checkpoints.

pub mod checkpoint;
pub mod optimizer;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{config_digest, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optimizer::{clip_scale, global_grad_norm, AdamConfig, AdamState, AdamW};

use crate::crossmodal::PretrainLossReport;
use crate::error::{ensure, Error, Result};
use crate::model::{check_leakage, Batch, InputMode, MixHic, ModelConfig, Task};
use crate::nn::{self, Ctx};
use crate::preprocessing::SamplePair;

pub const DEFAULT_GRAD_CLIP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub task: Task,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub optimizer_betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    pub input_mode: InputMode,
    /// Global-norm clipping threshold; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Stop after this many optimizer steps, even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn default_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    /// Desk-scale pretraining defaults.
    pub fn pretrain(seed: u64) -> Self {
        Self {
            phase: Phase::Pretrain,
            task: Task::None,
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 20,
            early_stop_patience: 20,
            optimizer_betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            seed,
            input_mode: InputMode::Bimodal,
            grad_clip: Some(DEFAULT_GRAD_CLIP),
            max_steps: None,
        }
    }

    /// Desk-scale fine-tuning defaults for `task`.
    pub fn finetune(task: Task, seed: u64) -> Self {
        Self {
            phase: Phase::Finetune,
            task,
            learning_rate: 1e-3,
            max_epochs: 50,
            early_stop_patience: 10,
            input_mode: if task == Task::Contact {
                InputMode::InferMissingHic
            } else {
                InputMode::Bimodal
            },
            ..Self::pretrain(seed)
        }
    }

    /// Published pretraining settings: 500 epochs, rate 1e-5, batch 256.
    pub fn published_pretrain(seed: u64) -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 256,
            max_epochs: 500,
            early_stop_patience: 500,
            weight_decay: 0.01,
            ..Self::pretrain(seed)
        }
    }

    /// Published fine-tuning settings: batch 64, up to 200 epochs, patience
    /// 20; rate 1e-4 for expression, 1e-5 for contacts and loops.
    pub fn published_finetune(task: Task, seed: u64) -> Self {
        Self {
            learning_rate: if task == Task::Cage { 1e-4 } else { 1e-5 },
            batch_size: 64,
            max_epochs: 200,
            early_stop_patience: 20,
            weight_decay: 0.01,
            ..Self::finetune(task, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(self.max_epochs >= 1, "max_epochs must be at least 1");
        ensure!(self.learning_rate > 0.0, "learning_rate must be positive");
        match self.phase {
            Phase::Pretrain => {
                ensure!(self.task == Task::None, "pretraining takes no task (got {})", self.task);
                ensure!(self.batch_size >= 2, "pretraining needs batch_size >= 2 for the contrastive loss");
            }
            Phase::Finetune => ensure!(self.task != Task::None, "fine-tuning needs a task"),
        }
        check_leakage(self.task, self.input_mode)?;
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0, "grad_clip must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.optimizer_betas.0,
            beta2: self.optimizer_betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Patience-based early stopping on a loss to minimise.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records `loss` for `epoch`; returns true when it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if self.best.is_none_or(|b| loss < b) {
            self.best = Some(loss);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.bad_epochs >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepLoss {
    Pretrain(PretrainLossReport),
    Task(f64),
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        match self {
            StepLoss::Pretrain(r) => r.l_pretrain,
            StepLoss::Task(l) => *l,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Batch index ranges for `n` samples; a trailing singleton joins the
/// previous batch when `min_batch` is 2.
pub fn batch_ranges(n: usize, batch_size: usize, min_batch: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if out.len() >= 2 && out.last().is_some_and(|r| r.len() < min_batch) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

fn dropout_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_add(1)
}

/// Model, optimizer and data-order state for one training run.
pub struct Trainer {
    pub model: MixHic,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: usize,
    pub best_metric: Option<f64>,
}

impl Trainer {
    pub fn new(model: MixHic, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        ensure!(
            model.task == config.task,
            "model task {} does not match training task {}",
            model.task,
            config.task
        );
        Ok(Self {
            optimizer: AdamW::new(config.adam())?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            epoch: 0,
            step: 0,
            best_metric: None,
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.config.seed,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model_config: self.model.config.clone(),
            task: self.model.task,
            train_config: Some(self.config.clone()),
            params: self.model.params.snapshot()?,
            optimizer: Some(self.optimizer.state.clone()),
            epoch: self.epoch,
            step: self.step,
            best_metric: self.best_metric,
            rng: Some(self.rng_state()),
        })
    }

    /// Resumes exactly where `ckpt` was taken.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt
            .train_config
            .clone()
            .ok_or_else(|| Error::validation("checkpoint carries no training configuration"))?;
        let model = model_from_checkpoint(ckpt)?;
        let mut trainer = Self::new(model, config)?;
        if let Some(state) = &ckpt.optimizer {
            trainer.optimizer.state = state.clone();
        }
        if let Some(r) = ckpt.rng {
            trainer.rng = ChaCha8Rng::seed_from_u64(r.seed);
            trainer.rng.set_word_pos(r.word_pos);
        }
        trainer.epoch = ckpt.epoch;
        trainer.step = ckpt.step;
        trainer.best_metric = ckpt.best_metric;
        Ok(trainer)
    }

    fn ctx(&self) -> Ctx {
        let p = self.model.config.encoder.dropout;
        Ctx::train(p, dropout_seed(self.config.seed, self.step))
    }

    fn loss(&self, batch: &Batch, ctx: &Ctx) -> Result<(Tensor, StepLoss)> {
        match self.config.phase {
            Phase::Pretrain => {
                let (loss, report) = self.model.pretrain_loss(batch, ctx)?;
                Ok((loss, StepLoss::Pretrain(report)))
            }
            Phase::Finetune => {
                let loss = self.model.task_loss(batch, self.config.input_mode, ctx)?;
                let v = nn::scalar(&loss)?;
                Ok((loss, StepLoss::Task(v)))
            }
        }
    }

    /// Forward, backward and one optimizer update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLoss> {
        let ctx = self.ctx();
        let (loss, report) = self.loss(batch, &ctx)?;
        self.step += 1;
        if !report.total().is_finite() {
            let detail = match report {
                StepLoss::Pretrain(r) => format!(
                    "l_con={} l_orth={} l_mapping={} l_pretrain={}",
                    r.l_con, r.l_orth, r.l_mapping, r.l_pretrain
                ),
                StepLoss::Task(l) => format!("loss={l}"),
            };
            return Err(Error::Numeric {
                stage: format!("training step {}: {detail}", self.step),
            });
        }
        let grads = loss.backward()?;
        let scale = match self.config.grad_clip {
            Some(_) => clip_scale(global_grad_norm(&self.model.params, &grads)?, self.config.grad_clip),
            None => 1.0,
        };
        self.optimizer.step(&self.model.params, &grads, scale)?;
        Ok(report)
    }

    fn batch_of(&self, data: &[SamplePair], idx: &[usize]) -> Result<Batch> {
        let refs: Vec<&SamplePair> = idx.iter().map(|&i| &data[i]).collect();
        Batch::from_samples(&refs, self.config.task)
    }

    fn min_batch(&self) -> usize {
        if self.config.phase == Phase::Pretrain {
            2
        } else {
            1
        }
    }

    fn step_budget_left(&self) -> bool {
        self.config.max_steps.is_none_or(|m| self.step < m)
    }

    /// One shuffled pass; `on_step` sees every step's losses.
    pub fn run_epoch(&mut self, data: &[SamplePair], on_step: &mut dyn FnMut(usize, &StepLoss)) -> Result<f64> {
        ensure!(!data.is_empty(), "training set is empty");
        ensure!(
            data.len() >= self.min_batch(),
            "pretraining needs at least 2 samples, got {}",
            data.len()
        );
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for r in batch_ranges(order.len(), self.config.batch_size, self.min_batch()) {
            if !self.step_budget_left() {
                break;
            }
            let batch = self.batch_of(data, &order[r.clone()])?;
            let loss = self.train_step(&batch)?;
            on_step(self.step, &loss);
            total += loss.total() * r.len() as f64;
            seen += r.len();
        }
        self.epoch += 1;
        Ok(if seen == 0 { f64::NAN } else { total / seen as f64 })
    }

    /// Sample-weighted mean loss without parameter updates.
    pub fn evaluate(&self, data: &[SamplePair]) -> Result<f64> {
        evaluate_loss(&self.model, &self.config, data)
    }
}

/// Mean loss of `model` on `data` in evaluation mode.
pub fn evaluate_loss(model: &MixHic, config: &TrainConfig, data: &[SamplePair]) -> Result<f64> {
    ensure!(!data.is_empty(), "evaluation set is empty");
    let ctx = Ctx::eval();
    let min_batch = if config.phase == Phase::Pretrain { 2 } else { 1 };
    ensure!(data.len() >= min_batch, "evaluation of the pretraining loss needs at least 2 samples");
    let mut total = 0.0;
    for r in batch_ranges(data.len(), config.batch_size, min_batch) {
        let refs: Vec<&SamplePair> = data[r.clone()].iter().collect();
        let batch = Batch::from_samples(&refs, config.task)?;
        let loss = match config.phase {
            Phase::Pretrain => model.pretrain_loss(&batch, &ctx)?.1.l_pretrain,
            Phase::Finetune => nn::scalar(&model.task_loss(&batch, config.input_mode, &ctx)?)?,
        };
        total += loss * r.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Builds a model matching `ckpt` and loads every parameter.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<MixHic> {
    let model = MixHic::new(&ckpt.model_config, ckpt.task, 0)?;
    load_all(&model, &ckpt.params)?;
    Ok(model)
}

fn load_all(model: &MixHic, params: &BTreeMap<String, Tensor>) -> Result<()> {
    let copied = model.params.load_matching(params)?;
    ensure!(
        copied == model.params.len() && copied == params.len(),
        "checkpoint has {} tensors, model expects {} ({} matched)",
        params.len(),
        model.params.len(),
        copied
    );
    Ok(())
}

/// Result of a training run.
pub struct TrainOutcome {
    /// Trainer state after the last epoch.
    pub trainer: Trainer,
    /// Parameters of the best epoch.
    pub best: Checkpoint,
    pub epochs: Vec<EpochSummary>,
    pub steps: Vec<(usize, StepLoss)>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|(_, l)| l.total())
    }

    /// `step l_con l_orth l_mapping l_pretrain`, or `step loss` for tasks.
    pub fn step_log(&self) -> String {
        let mut s = String::new();
        match self.trainer.config.phase {
            Phase::Pretrain => s.push_str("step\tl_con\tl_orth\tl_mapping\tl_pretrain\n"),
            Phase::Finetune => s.push_str("step\tloss\n"),
        }
        for (step, l) in &self.steps {
            match l {
                StepLoss::Pretrain(r) => {
                    let _ = writeln!(s, "{step}\t{}\t{}\t{}\t{}", r.l_con, r.l_orth, r.l_mapping, r.l_pretrain);
                }
                StepLoss::Task(v) => {
                    let _ = writeln!(s, "{step}\t{v}");
                }
            }
        }
        s
    }

    /// `epoch train_loss val_loss` (`NA` without a validation set).
    pub fn epoch_log(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_loss\n");
        for e in &self.epochs {
            let val = e.val_loss.map_or("NA".to_string(), |v| v.to_string());
            let _ = writeln!(s, "{}\t{}\t{val}", e.epoch, e.train_loss);
        }
        s
    }
}

fn run(mut trainer: Trainer, train: &[SamplePair], validation: &[SamplePair]) -> Result<TrainOutcome> {
    ensure!(!train.is_empty(), "training set is empty");
    let mut stopper = EarlyStopping::new(trainer.config.early_stop_patience);
    let mut best = trainer.checkpoint()?;
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut stopped_early = false;
    while trainer.epoch < trainer.config.max_epochs && trainer.step_budget_left() {
        let train_loss = trainer.run_epoch(train, &mut |step, l| steps.push((step, *l)))?;
        let val_loss = if validation.is_empty() {
            None
        } else {
            Some(trainer.evaluate(validation)?)
        };
        let monitored = val_loss.unwrap_or(train_loss);
        epochs.push(EpochSummary {
            epoch: trainer.epoch,
            train_loss,
            val_loss,
        });
        if stopper.observe(trainer.epoch, monitored) {
            trainer.best_metric = Some(monitored);
            best = trainer.checkpoint()?;
        }
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        trainer,
        best,
        epochs,
        steps,
        stopped_early,
    })
}

/// Self-supervised pretraining of a fresh model.
pub fn pretrain(
    train: &[SamplePair],
    validation: &[SamplePair],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    ensure!(config.phase == Phase::Pretrain, "pretrain called with a fine-tuning config");
    config.validate()?;
    ensure!(!train.is_empty(), "training set is empty");
    let model = MixHic::new(model_config, Task::None, config.seed)?;
    run(Trainer::new(model, config.clone())?, train, validation)
}

/// Task fine-tuning, starting from `pretrained` encoders when given.
pub fn finetune(
    train: &[SamplePair],
    validation: &[SamplePair],
    model_config: &ModelConfig,
    pretrained: Option<&Checkpoint>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    ensure!(config.phase == Phase::Finetune, "finetune called with a pretraining config");
    config.validate()?;
    ensure!(!train.is_empty(), "training set is empty");
    let model_config = match pretrained {
        Some(p) => {
            ensure!(
                p.model_config.encoder == model_config.encoder,
                "pretrained encoder configuration differs from the requested one"
            );
            ModelConfig {
                heads: model_config.heads.clone(),
                ..p.model_config.clone()
            }
        }
        None => model_config.clone(),
    };
    let model = MixHic::new(&model_config, config.task, config.seed)?;
    if let Some(p) = pretrained {
        let copied = model.params.load_matching(&p.params)?;
        ensure!(copied == p.params.len(), "pretrained checkpoint has parameters the model lacks");
    }
    run(Trainer::new(model, config.clone())?, train, validation)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_semantics() {
        let mut s = EarlyStopping::new(2);
        let mut stopped_at = None;
        for (epoch, loss) in [(1, 1.0), (2, 1.5), (3, 2.0), (4, 2.5)] {
            s.observe(epoch, loss);
            if s.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(3));
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn batch_ranges_merge_singleton() {
        assert_eq!(batch_ranges(64, 16, 2).len(), 4);
        assert_eq!(batch_ranges(10, 3, 1).len(), 4);
        let r = batch_ranges(10, 3, 2);
        assert_eq!(r.len(), 3);
        assert_eq!(r[2], 6..10);
        assert_eq!(batch_ranges(1, 4, 2), vec![0..1]);
    }

    #[test]
    fn config_rules() {
        let mut c = TrainConfig::finetune(Task::Contact, 1);
        assert!(c.validate().is_ok());
        c.input_mode = InputMode::Bimodal;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("bimodal"), "{err}");
        let mut p = TrainConfig::pretrain(1);
        p.task = Task::Loop;
        assert!(p.validate().is_err());
        let published = TrainConfig::published_finetune(Task::Cage, 0);
        assert_eq!((published.learning_rate, published.batch_size, published.early_stop_patience), (1e-4, 64, 20));
        assert_eq!(TrainConfig::published_pretrain(0).batch_size, 256);
    }
}
