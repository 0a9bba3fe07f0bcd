// Shared finite-difference cases: every differentiable op on random inputs,
// plus the full tiny model. Included by the core tests and the acceptance suite.

#![allow(dead_code)]

use camenn_core::autograd::{Tape, Var};
use camenn_core::encoder::EncoderConfig;
use camenn_core::gradcheck::{check_inputs, check_params, GradCheckConfig, GradCheckReport};
use camenn_core::model::{CameNN, ItemFeatures, ModelConfig};
use camenn_core::moe::{ExpertKind, GatingMode, MoeConfig};
use camenn_core::params::ParamStore;
use camenn_core::rng::{self, DetRng};
use camenn_core::tasks::{joint_loss, CvrHead, LossWeights, Task, TaskBatch, TaskExample};
use camenn_core::{Result, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn random(rng: &mut DetRng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng::uniform(rng, -1.5, 1.5)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Entries bounded away from zero, for ops with a kink there.
pub fn random_off_zero(rng: &mut DetRng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng::uniform(rng, 0.05, 1.5);
            if rng::uniform(rng, 0.0, 1.0) < 0.5 { -m } else { m }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn probs(rng: &mut DetRng, n: usize) -> Tensor {
    Tensor::matrix(n, 1, (0..n).map(|_| rng::uniform(rng, 0.05, 0.95)).collect()).unwrap()
}

/// `Σ x ⊙ R` for a fixed random `R`, so symmetric gradients do not cancel.
pub fn weighted_sum(tape: &mut Tape<'_>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let mut r = rng::stream(seed, 0x5eed);
    let w = Tensor::new(shape, (0..n).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

pub type OpFn = Box<dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape<'_>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, inputs, f: Box::new(f) }
}

/// One instance of every op with shapes drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng::stream(seed, 0x0905);
    let m = 1 + rng::index(&mut r, 4);
    let k = 1 + rng::index(&mut r, 4);
    let n = 1 + rng::index(&mut r, 4);
    let heads = 1 + rng::index(&mut r, 3);
    let dh = 1 + rng::index(&mut r, 2);
    let l = 2 + rng::index(&mut r, 4);
    let s = seed;
    let mut mask: Vec<bool> = (0..l).map(|_| rng::uniform(&mut r, 0.0, 1.0) < 0.7).collect();
    mask[rng::index(&mut r, l)] = true;
    let keep_n = 1 + rng::index(&mut r, n);
    let mut keep: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut r, &mut keep);
    keep.truncate(keep_n);
    let rows: Vec<usize> = (0..3).map(|_| rng::index(&mut r, m)).collect();
    let labels: Vec<f64> = (0..m).map(|i| (i % 2) as f64).collect();
    let elem = rng::index(&mut r, m * n);
    let scalar = Tensor::scalar(rng::uniform(&mut r, -2.0, 2.0));
    let constant = rng::uniform(&mut r, -2.0, 2.0);

    vec![
        case("matmul", vec![random(&mut r, m, k), random(&mut r, k, n)], move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        case("transpose", vec![random(&mut r, m, n)], move |t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, s)
        }),
        case("add", vec![random(&mut r, m, n), random(&mut r, m, n)], move |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        case("add_row", vec![random(&mut r, m, n), Tensor::vector(random(&mut r, 1, n).into_data())], move |t, v| {
            let y = t.add_row(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        case("mul", vec![random(&mut r, m, n), random(&mut r, m, n)], move |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        case("scale", vec![random(&mut r, m, n)], move |t, v| {
            let y = t.scale(v[0], constant);
            weighted_sum(t, y, s)
        }),
        case("add_scalar", vec![random(&mut r, m, n)], move |t, v| {
            let y = t.add_scalar(v[0], constant);
            weighted_sum(t, y, s)
        }),
        case("scale_by", vec![random(&mut r, m, n), scalar], move |t, v| {
            let y = t.scale_by(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        case("relu", vec![random_off_zero(&mut r, m, n)], move |t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, s)
        }),
        case("gelu", vec![random(&mut r, m, n)], move |t, v| {
            let y = t.gelu(v[0]);
            weighted_sum(t, y, s)
        }),
        case("sigmoid", vec![random(&mut r, m, n)], move |t, v| {
            let y = t.sigmoid(v[0]);
            weighted_sum(t, y, s)
        }),
        case("tanh", vec![random(&mut r, m, n)], move |t, v| {
            let y = t.tanh(v[0]);
            weighted_sum(t, y, s)
        }),
        case("softmax", vec![random(&mut r, m, n)], move |t, v| {
            let y = t.softmax(v[0]);
            weighted_sum(t, y, s)
        }),
        case(
            "layer_norm",
            vec![random(&mut r, m, n + 1), Tensor::vector(random(&mut r, 1, n + 1).into_data()), Tensor::vector(random(&mut r, 1, n + 1).into_data())],
            move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, s)
            },
        ),
        case("concat_rows", vec![random(&mut r, m, n), random(&mut r, k, n)], move |t, v| {
            let y = t.concat(&[v[0], v[1]], 0)?;
            weighted_sum(t, y, s)
        }),
        case("concat_cols", vec![random(&mut r, m, n), random(&mut r, m, k)], move |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weighted_sum(t, y, s)
        }),
        case("mean_pool_rows", vec![random(&mut r, m, n)], move |t, v| {
            let y = t.mean_pool(v[0], 0)?;
            weighted_sum(t, y, s)
        }),
        case("mean_pool_cols", vec![random(&mut r, m, n)], move |t, v| {
            let y = t.mean_pool(v[0], 1)?;
            weighted_sum(t, y, s)
        }),
        case("gather_rows", vec![random(&mut r, m, n)], move |t, v| {
            let y = t.gather_rows(v[0], &rows)?;
            weighted_sum(t, y, s)
        }),
        case(
            "attention",
            vec![random(&mut r, l, heads * dh), random(&mut r, l, heads * dh), random(&mut r, l, heads * dh)],
            move |t, v| {
                let y = t.attention(v[0], v[1], v[2], heads, None)?;
                weighted_sum(t, y, s)
            },
        ),
        case(
            "attention_masked",
            vec![random(&mut r, l, heads * dh), random(&mut r, l, heads * dh), random(&mut r, l, heads * dh)],
            move |t, v| {
                let y = t.attention(v[0], v[1], v[2], heads, Some(&mask))?;
                weighted_sum(t, y, s)
            },
        ),
        case("topk_renorm", vec![random(&mut r, 1, n)], move |t, v| {
            // renormalization expects positive weights
            let p = t.softmax(v[0]);
            let y = t.topk_renorm(p, &keep)?;
            weighted_sum(t, y, s)
        }),
        case("element", vec![random(&mut r, m, n)], move |t, v| {
            let y = t.element(v[0], elem)?;
            weighted_sum(t, y, s)
        }),
        case("bce_loss", vec![probs(&mut r, m)], move |t, v| t.bce_loss(v[0], &labels)),
        case("sum", vec![random(&mut r, m, n)], move |t, v| Ok(t.sum(v[0]))),
    ]
}

pub fn check_op(case: &OpCase) -> GradCheckReport {
    check_inputs(&case.inputs, GradCheckConfig::default(), |t, v| (case.f)(t, v)).unwrap()
}

/// Gradient check of the embedding lookup through a parameter table.
pub fn check_embedding_lookup(seed: u64) -> GradCheckReport {
    let mut r = rng::stream(seed, 0xe3b);
    let mut params = ParamStore::new();
    let rows = 2 + rng::index(&mut r, 5);
    let id = params.insert("table", random(&mut r, rows, 3), true).unwrap();
    let ids: Vec<usize> = (0..4).map(|_| rng::index(&mut r, rows)).collect();
    check_params(&params, GradCheckConfig::default(), |_| true, |t| {
        let y = t.embedding_lookup(id, &ids)?;
        weighted_sum(t, y, seed)
    })
    .unwrap()
}

/// Model used by the full-forward gradient check: d = 16, two experts.
pub fn tiny_model(kind: ExpertKind, mode: GatingMode, top_k: usize, seed: u64) -> CameNN {
    let config = ModelConfig {
        encoder: EncoderConfig::new(16),
        moe: MoeConfig { num_experts: 2, top_k, expert_kind: kind, gating_mode: mode },
        max_text_len: 4,
        max_patch_len: 4,
        patch_pixels: 6,
        vocab_size: 12,
        num_users: 3,
        num_contexts: 2,
        cvr_head: CvrHead::MeanPool,
        init_seed: seed,
        provider_seed: seed,
    };
    CameNN::new(config).unwrap()
}

/// Provider features of three small items.
pub fn tiny_features(seed: u64) -> Vec<ItemFeatures> {
    let mut r = rng::stream(seed, 0xfea7);
    (0..3)
        .map(|i| ItemFeatures {
            text: Some(random(&mut r, 2 + i % 2, 16)),
            image: Some(random(&mut r, 3 + i % 2, 16)),
        })
        .collect()
}

/// One batch per task over the tiny features. The longest input has
/// 2 + 8 + 8 = 18 rows.
pub fn tiny_batches() -> [TaskBatch; 3] {
    let align = |text_item, image_item, label| TaskExample { other: None, behavior: vec![], text_item, image_item, label };
    [
        TaskBatch { task: Task::Ita, examples: vec![align(0, 0, true), align(1, 2, false)] },
        TaskBatch { task: Task::Tia, examples: vec![align(1, 1, true), align(2, 0, false)] },
        TaskBatch {
            task: Task::Cvr,
            examples: vec![
                TaskExample { other: Some((1, 0)), behavior: vec![1], text_item: 2, image_item: 2, label: true },
                TaskExample { other: Some((2, 1)), behavior: vec![], text_item: 0, image_item: 0, label: false },
            ],
        },
    ]
}

/// Finite-difference check of the joint loss against every trainable tensor
/// of a tiny model.
pub fn check_full_model(kind: ExpertKind, mode: GatingMode, top_k: usize, seed: u64, max_entries: Option<usize>) -> GradCheckReport {
    let model = tiny_model(kind, mode, top_k, seed);
    let features = tiny_features(seed);
    let batches = tiny_batches();
    let config = GradCheckConfig { max_entries_per_tensor: max_entries, ..GradCheckConfig::default() };
    let weights = LossWeights([1.0, 0.7, 1.3]);
    check_params(&model.params, config, |_| true, |tape| {
        // the tape reads the perturbed store; the model only supplies ids
        let loss = joint_loss(&model, tape, [Some(&batches[0]), Some(&batches[1]), Some(&batches[2])], &weights, &features)?;
        Ok(loss.total)
    })
    .unwrap()
}
