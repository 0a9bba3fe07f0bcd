//! Data preparation, the training loop, early stopping and evaluation.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::autograd::{Tape, BCE_CLAMP};
use crate::embedding::{split_patches, tokenize, ImagePatchGrid, TextTokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auc};
use crate::model::{CameNN, ItemFeatures};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::rng::hash_words;
use crate::synth::{split_dataset, split_ids, Dataset, InteractionRecord};
use crate::tasks::{build_alignment_batch, build_cvr_batch, joint_loss, LossWeights, Task, TaskBatch};

/// Image grid used for patch tokens.
pub const PATCH_GRID: (usize, usize) = (3, 3);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    /// Share of users whose records are used for training (the rest is test).
    pub train_fraction: f64,
    /// Share of training users held back for early stopping.
    pub validation_fraction: f64,
    /// Share of items whose text/image pairs feed the alignment tasks; the
    /// rest is held out for alignment evaluation and similarity export.
    pub alignment_train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_fraction: 0.75, validation_fraction: 0.1, alignment_train_fraction: 0.75 }
    }
}

/// Tokenized catalog and the user and item splits.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub vocab: Vocab,
    pub tokens: Vec<TextTokenSequence>,
    pub grids: Vec<ImagePatchGrid>,
    pub train_log: Vec<InteractionRecord>,
    pub valid_log: Vec<InteractionRecord>,
    pub test_log: Vec<InteractionRecord>,
    pub align_train_items: Vec<usize>,
    pub align_holdout_items: Vec<usize>,
    pub num_users: usize,
}

impl PreparedData {
    pub fn new(dataset: &Dataset, split: &SplitConfig, max_text_len: usize, seed: u64) -> Result<Self> {
        for (i, item) in dataset.items.iter().enumerate() {
            if item.id != i {
                return Err(Error::contract("catalog item ids must equal their index"));
            }
        }
        let vocab = Vocab::build(dataset.items.iter().map(|i| i.text.as_str()));
        let tokens = dataset.items.iter().map(|i| tokenize(&i.text, &vocab, max_text_len)).collect();
        let grids = dataset
            .items
            .iter()
            .map(|i| split_patches(&i.image, PATCH_GRID.0, PATCH_GRID.1))
            .collect::<Result<_>>()?;
        let (train_all, test_log) = split_dataset(&dataset.interactions, split.train_fraction, seed)?;
        let (train_log, valid_log) = split_dataset(&train_all, 1.0 - split.validation_fraction, seed ^ 0x7a11d)?;
        let items: BTreeSet<usize> = (0..dataset.items.len()).collect();
        let align_set = split_ids(&items, split.alignment_train_fraction, seed ^ 0xa119)?;
        let align_train_items = align_set.iter().copied().collect();
        let align_holdout_items = items.difference(&align_set).copied().collect();
        let num_users = dataset
            .users
            .len()
            .max(dataset.interactions.iter().map(|r| r.user + 1).max().unwrap_or(0));
        Ok(PreparedData {
            vocab,
            tokens,
            grids,
            train_log,
            valid_log,
            test_log,
            align_train_items,
            align_holdout_items,
            num_users,
        })
    }

    /// Frozen provider features of every item, indexed by item id.
    pub fn features(&self, model: &CameNN) -> Result<Vec<ItemFeatures>> {
        self.tokens.iter().zip(&self.grids).map(|(t, g)| model.item_features(t, g)).collect()
    }

    pub fn patch_pixels(&self) -> usize {
        self.grids.first().map_or(1, ImagePatchGrid::patch_pixels)
    }

    pub fn max_patch_len(&self) -> usize {
        self.grids.iter().map(ImagePatchGrid::len).max().unwrap_or(1).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Upper bound on optimizer steps per epoch; `None` runs a full pass.
    pub max_steps_per_epoch: Option<usize>,
    /// Upper bound on evaluated rows per set; `None` uses all.
    pub max_eval_rows: Option<usize>,
    pub loss_weights: LossWeights,
    pub negative_ratio: usize,
    pub max_behavior: usize,
    pub num_contexts: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            batch_size: 32,
            epochs: 20,
            patience: 3,
            max_steps_per_epoch: None,
            max_eval_rows: None,
            loss_weights: LossWeights::default(),
            negative_ratio: 1,
            max_behavior: 3,
            num_contexts: 8,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if self.batch_size == 0 || self.num_contexts == 0 {
            return Err(Error::contract("batch_size and num_contexts must be positive"));
        }
        if self.max_steps_per_epoch == Some(0) || self.max_eval_rows == Some(0) {
            return Err(Error::contract("step and row limits must be positive"));
        }
        Ok(())
    }
}

/// Whether an epoch improved the monitored metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: None, best_epoch: None, bad_epochs: 0 }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            return StopDecision::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// Metrics of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub cvr_auc: f64,
    pub ita_accuracy: f64,
    pub tia_accuracy: f64,
    /// Mean BCE per task, in the order ita, tia, cvr.
    pub losses: [f64; 3],
    pub cvr_rows: usize,
    pub alignment_rows: usize,
}

/// Probabilities of `batch.task` for every example.
pub fn predict_batch(model: &CameNN, batch: &TaskBatch, features: &[ItemFeatures]) -> Result<Vec<f64>> {
    batch
        .examples
        .iter()
        .map(|ex| model.predict(&ex.input(features)?, batch.task))
        .collect()
}

fn mean_bce(probs: &[f64], labels: &[bool]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if y {
                -libm::log(p)
            } else {
                -libm::log(1.0 - p)
            }
        })
        .sum();
    total / probs.len() as f64
}

fn truncated(batch: TaskBatch, limit: Option<usize>) -> TaskBatch {
    match limit {
        Some(n) if n < batch.len() => TaskBatch { task: batch.task, examples: batch.examples[..n].to_vec() },
        _ => batch,
    }
}

/// Evaluation sets built once from a log and an item list.
#[derive(Debug, Clone)]
pub struct EvalSets {
    pub cvr: TaskBatch,
    pub ita: TaskBatch,
    pub tia: TaskBatch,
}

impl EvalSets {
    pub fn new(log: &[InteractionRecord], items: &[usize], config: &TrainConfig, seed: u64) -> Result<Self> {
        let cvr = build_cvr_batch(log, config.max_behavior, config.num_contexts, seed)?;
        let ita = build_alignment_batch(Task::Ita, items, config.negative_ratio, seed)?;
        let tia = build_alignment_batch(Task::Tia, items, config.negative_ratio, seed)?;
        Ok(EvalSets {
            cvr: truncated(cvr, config.max_eval_rows),
            ita: truncated(ita, config.max_eval_rows),
            tia: truncated(tia, config.max_eval_rows),
        })
    }

    pub fn evaluate(&self, model: &CameNN, features: &[ItemFeatures]) -> Result<EvalReport> {
        let mut losses = [0.0; 3];
        let mut run = |batch: &TaskBatch| -> Result<(Vec<f64>, Vec<bool>)> {
            let probs = predict_batch(model, batch, features)?;
            let labels: Vec<bool> = batch.examples.iter().map(|e| e.label).collect();
            losses[batch.task.index()] = mean_bce(&probs, &labels);
            Ok((probs, labels))
        };
        let (cp, cl) = run(&self.cvr)?;
        let (ip, il) = run(&self.ita)?;
        let (tp, tl) = run(&self.tia)?;
        Ok(EvalReport {
            cvr_auc: auc(&cp, &cl)?,
            ita_accuracy: accuracy(&ip, &il, 0.5)?,
            tia_accuracy: accuracy(&tp, &tl, 0.5)?,
            losses,
            cvr_rows: self.cvr.len(),
            alignment_rows: self.ita.len() + self.tia.len(),
        })
    }
}

/// Summary of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Mean training loss per task over the epoch; `None` for inactive tasks.
    pub train_losses: [Option<f64>; 3],
    pub validation: EvalReport,
    pub decision: StopDecision,
}

/// Training state. Everything needed to continue a run bit-exactly lives here.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: CameNN,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub stopper: EarlyStopper,
    /// Parameters at the best validation epoch.
    pub best_params: Option<ParamStore>,
    pub stopped: bool,
}

/// Seed of the stream used for `purpose` in `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize, purpose: u64) -> u64 {
    hash_words(&[seed, epoch as u64, purpose])
}

impl Trainer {
    pub fn new(model: CameNN, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(config.adam, &model.params);
        Ok(Trainer { model, adam, config, epoch: 0, stopper: EarlyStopper::new(config.patience), best_params: None, stopped: false })
    }

    pub fn finished(&self) -> bool {
        self.stopped || self.epoch >= self.config.epochs
    }

    /// One optimizer step on the given batches. Returns the per-task losses.
    pub fn step(&mut self, batches: [Option<&TaskBatch>; 3], features: &[ItemFeatures]) -> Result<[Option<f64>; 3]> {
        let (grads, per_task) = {
            let mut tape = Tape::new(&self.model.params);
            let loss = joint_loss(&self.model, &mut tape, batches, &self.config.loss_weights, features)?;
            (tape.backward(loss.total)?, loss.per_task)
        };
        self.adam.step(&mut self.model.params, &grads)?;
        Ok(per_task)
    }

    /// Trains one epoch, evaluates on `validation` and updates early stopping.
    pub fn run_epoch(&mut self, data: &PreparedData, features: &[ItemFeatures], validation: &EvalSets) -> Result<EpochLog> {
        let c = self.config;
        let e = self.epoch;
        let weights = c.loss_weights;
        let cvr = if weights.get(Task::Cvr) > 0.0 {
            Some(build_cvr_batch(&data.train_log, c.max_behavior, c.num_contexts, epoch_seed(c.seed, e, 0xC))?)
        } else {
            None
        };
        let mut align: [Option<(TaskBatch, usize)>; 2] = [None, None];
        for task in [Task::Ita, Task::Tia] {
            if weights.get(task) > 0.0 {
                let b = build_alignment_batch(task, &data.align_train_items, c.negative_ratio, epoch_seed(c.seed, e, task.index() as u64))?;
                align[task.index()] = Some((b, 0));
            }
        }
        let bs = c.batch_size;
        let passes = |n: usize| n.div_ceil(bs);
        let mut steps = match (&cvr, &align) {
            (Some(b), _) => passes(b.len()),
            (None, [Some((b, _)), _]) | (None, [None, Some((b, _))]) => passes(b.len()),
            _ => unreachable!("validated loss weights"),
        };
        if let Some(limit) = c.max_steps_per_epoch {
            steps = steps.min(limit);
        }
        let mut sums = [0.0; 3];
        for s in 0..steps {
            let mut batches: [Option<TaskBatch>; 3] = [None, None, None];
            if let Some(b) = &cvr {
                batches[Task::Cvr.index()] = Some(chunk(b, s, bs));
            }
            for task in [Task::Ita, Task::Tia] {
                if let Some((b, cycle)) = &mut align[task.index()] {
                    let per_pass = passes(b.len());
                    if s > 0 && s % per_pass == 0 {
                        *cycle += 1;
                        let seed = epoch_seed(c.seed, e, (*cycle as u64) << 8 | task.index() as u64);
                        *b = build_alignment_batch(task, &data.align_train_items, c.negative_ratio, seed)?;
                    }
                    batches[task.index()] = Some(chunk(b, s % per_pass, bs));
                }
            }
            let losses = self.step([batches[0].as_ref(), batches[1].as_ref(), batches[2].as_ref()], features)?;
            for (acc, l) in sums.iter_mut().zip(losses) {
                *acc += l.unwrap_or(0.0);
            }
        }
        let mut train_losses = [None; 3];
        for task in weights.active() {
            train_losses[task.index()] = Some(sums[task.index()] / steps as f64);
        }
        let validation = validation.evaluate(&self.model, features)?;
        let decision = self.stopper.observe(e, validation.cvr_auc);
        if decision == StopDecision::Improved {
            self.best_params = Some(self.model.params.clone());
        }
        self.epoch += 1;
        if decision == StopDecision::Stop {
            self.stopped = true;
        }
        Ok(EpochLog { epoch: e, steps, train_losses, validation, decision })
    }

    /// Runs epochs until early stopping or the epoch budget; `on_epoch` sees
    /// the state after every epoch.
    pub fn fit(
        &mut self,
        data: &PreparedData,
        features: &[ItemFeatures],
        validation: &EvalSets,
        mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        while !self.finished() {
            let log = self.run_epoch(data, features, validation)?;
            on_epoch(self, &log)?;
        }
        Ok(())
    }

    /// The model with the best validation parameters (the current ones if no
    /// epoch has finished).
    pub fn best_model(&self) -> Result<CameNN> {
        match &self.best_params {
            Some(p) => CameNN::from_params(self.model.config, p.clone()),
            None => Ok(self.model.clone()),
        }
    }
}

fn chunk(batch: &TaskBatch, index: usize, size: usize) -> TaskBatch {
    let start = index * size;
    let end = (start + size).min(batch.len());
    TaskBatch { task: batch.task, examples: batch.examples[start..end].to_vec() }
}
