//! Task heads, batch construction and the joint loss.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{CameNN, ExampleInput, ItemFeatures, ItemView};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::synth::{all_histories, InteractionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    /// Image-to-text alignment: is the text the item's own?
    Ita,
    /// Text-to-image alignment: is the image the item's own?
    Tia,
    /// Conversion: did the user buy the target?
    Cvr,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Ita, Task::Tia, Task::Cvr];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ita => "ita",
            Task::Tia => "tia",
            Task::Cvr => "cvr",
        }
    }

    pub fn is_alignment(self) -> bool {
        self != Task::Cvr
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ita" => Ok(Task::Ita),
            "tia" => Ok(Task::Tia),
            "cvr" => Ok(Task::Cvr),
            other => Err(Error::contract(format!("unknown task `{other}`"))),
        }
    }
}

/// Which tower row feeds the conversion head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CvrHead {
    /// Mean over all positions.
    #[default]
    MeanPool,
    /// The target block's [CLS] row.
    Cls,
}

impl CvrHead {
    pub fn as_str(self) -> &'static str {
        match self {
            CvrHead::MeanPool => "mean_pool",
            CvrHead::Cls => "cls",
        }
    }
}

impl FromStr for CvrHead {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_pool" => Ok(CvrHead::MeanPool),
            "cls" => Ok(CvrHead::Cls),
            other => Err(Error::contract(format!("unknown cvr head `{other}`"))),
        }
    }
}

/// Linear classifier `w: d × 1`, `b: 1` of one task.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl HeadParams {
    pub fn prefix(task: Task) -> String {
        format!("head.{}.", task.as_str())
    }

    pub fn weight_name(task: Task) -> String {
        format!("head.{}.w", task.as_str())
    }

    pub fn bias_name(task: Task) -> String {
        format!("head.{}.b", task.as_str())
    }

    pub fn resolve(params: &ParamStore, task: Task) -> Result<Self> {
        Ok(HeadParams {
            w: params.id(&Self::weight_name(task))?,
            b: params.id(&Self::bias_name(task))?,
        })
    }
}

/// `sigmoid(w · pooled + b)` as a `1 × 1` tensor. Alignment heads read the
/// [CLS] row; the conversion head follows `cvr_head`.
pub fn head_forward(
    tape: &mut Tape<'_>,
    head: &HeadParams,
    task: Task,
    tower: Var,
    cls_index: usize,
    cvr_head: CvrHead,
) -> Result<Var> {
    let pooled = if task == Task::Cvr && cvr_head == CvrHead::MeanPool {
        tape.mean_pool(tower, 0)?
    } else {
        tape.gather_rows(tower, &[cls_index])?
    };
    let w = tape.param(head.w);
    let b = tape.param(head.b);
    let logit = tape.matmul(pooled, w)?;
    let logit = tape.add_row(logit, b)?;
    Ok(tape.sigmoid(logit))
}

/// One labeled example, described by catalog item ids.
///
/// Alignment rows carry no user or behavior; their text and image may come
/// from different items. Conversion rows always use one target item for both.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskExample {
    pub other: Option<(usize, usize)>,
    pub behavior: Vec<usize>,
    pub text_item: usize,
    pub image_item: usize,
    pub label: bool,
}

impl TaskExample {
    pub fn label_value(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }

    /// Resolves ids against precomputed provider features (indexed by item id).
    pub fn input<'a>(&self, features: &'a [ItemFeatures]) -> Result<ExampleInput<'a>> {
        let get = |id: usize| {
            features
                .get(id)
                .ok_or_else(|| Error::contract(format!("item {id} has no features")))
        };
        let behavior = self.behavior.iter().map(|&b| get(b).map(ItemView::of)).collect::<Result<_>>()?;
        Ok(ExampleInput {
            other: self.other,
            behavior,
            target: ItemView::mixed(get(self.text_item)?, get(self.image_item)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskBatch {
    pub task: Task,
    pub examples: Vec<TaskExample>,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.examples.iter().map(TaskExample::label_value).collect()
    }

    /// Consecutive slices of at most `size` examples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = TaskBatch> + '_ {
        self.examples.chunks(size.max(1)).map(move |c| TaskBatch { task: self.task, examples: c.to_vec() })
    }
}

/// For each item one positive and `negative_ratio` negatives. An image-to-text
/// negative swaps in another item's text, a text-to-image negative another
/// item's image. The result is shuffled.
pub fn build_alignment_batch(task: Task, items: &[usize], negative_ratio: usize, seed: u64) -> Result<TaskBatch> {
    if !task.is_alignment() {
        return Err(Error::contract("alignment batches are for ita or tia"));
    }
    if items.len() < 2 && negative_ratio > 0 {
        return Err(Error::contract("negatives need at least two catalog items"));
    }
    let mut rng = rng::stream(seed, 0xA11 + task.index() as u64);
    let mut examples = Vec::with_capacity(items.len() * (1 + negative_ratio));
    for (pos, &item) in items.iter().enumerate() {
        examples.push(TaskExample { other: None, behavior: Vec::new(), text_item: item, image_item: item, label: true });
        for _ in 0..negative_ratio {
            let mut k = rng::index(&mut rng, items.len() - 1);
            if k >= pos {
                k += 1;
            }
            let other = items[k];
            let (text_item, image_item) = match task {
                Task::Ita => (other, item),
                _ => (item, other),
            };
            examples.push(TaskExample { other: None, behavior: Vec::new(), text_item, image_item, label: false });
        }
    }
    rng::shuffle(&mut rng, &mut examples);
    Ok(TaskBatch { task, examples })
}

/// One conversion row per logged impression. Behavior holds at most
/// `max_behavior` items the user bought strictly before the impression; the
/// context id is the timestamp modulo `num_contexts`.
pub fn build_cvr_batch(
    log: &[InteractionRecord],
    max_behavior: usize,
    num_contexts: usize,
    seed: u64,
) -> Result<TaskBatch> {
    if log.is_empty() {
        return Err(Error::contract("interaction log is empty"));
    }
    if num_contexts == 0 {
        return Err(Error::contract("num_contexts must be positive"));
    }
    let histories = all_histories(log, max_behavior);
    let mut examples: Vec<TaskExample> = log
        .iter()
        .zip(histories)
        .map(|(r, behavior)| TaskExample {
            other: Some((r.user, (r.timestamp % num_contexts as u64) as usize)),
            behavior,
            text_item: r.item,
            image_item: r.item,
            label: r.bought,
        })
        .collect();
    let mut rng = rng::stream(seed, 0xC7);
    rng::shuffle(&mut rng, &mut examples);
    Ok(TaskBatch { task: Task::Cvr, examples })
}

/// Mean BCE of one batch together with the predicted probabilities.
pub fn batch_loss(model: &CameNN, tape: &mut Tape<'_>, batch: &TaskBatch, features: &[ItemFeatures]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut probs = Vec::with_capacity(batch.len());
    for ex in &batch.examples {
        let input = ex.input(features)?;
        let fwd = model.forward(tape, &input, &[batch.task])?;
        probs.push(fwd.probs[batch.task.index()].expect("requested task"));
    }
    let p = tape.concat(&probs, 0)?;
    tape.bce_loss(p, &batch.labels())
}

/// Task loss weights, in the order ita, tia, cvr.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights(pub [f64; 3]);

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights([1.0; 3])
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::contract("loss weights must be finite and non-negative"));
        }
        if self.0.iter().all(|&l| l == 0.0) {
            return Err(Error::contract("at least one loss weight must be positive"));
        }
        Ok(())
    }

    pub fn get(&self, task: Task) -> f64 {
        self.0[task.index()]
    }

    /// Tasks that contribute to the loss.
    pub fn active(&self) -> impl Iterator<Item = Task> + '_ {
        Task::ALL.into_iter().filter(|&t| self.get(t) > 0.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    /// Unweighted per-task losses; `None` for tasks with zero weight.
    pub per_task: [Option<f64>; 3],
}

/// `Σ_k λ_k · BCE_k`. Tasks with zero weight are not evaluated at all, so their
/// exclusive parameters receive no gradient.
pub fn joint_loss(
    model: &CameNN,
    tape: &mut Tape<'_>,
    batches: [Option<&TaskBatch>; 3],
    weights: &LossWeights,
    features: &[ItemFeatures],
) -> Result<JointLoss> {
    weights.validate()?;
    let mut total: Option<Var> = None;
    let mut per_task = [None; 3];
    for task in weights.active() {
        let batch = batches[task.index()]
            .ok_or_else(|| Error::contract(format!("no batch for weighted task {task}")))?;
        if batch.task != task {
            return Err(Error::contract(format!("batch for {} given in the {task} slot", batch.task)));
        }
        let loss = batch_loss(model, tape, batch, features)?;
        per_task[task.index()] = Some(tape.value(loss).item());
        let weighted = tape.scale(loss, weights.get(task));
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok(JointLoss { total: total.expect("validated weights"), per_task })
}
