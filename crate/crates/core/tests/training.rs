// Optimizer, metrics and training-loop oracles.

use camenn_core::autograd::Tape;
use camenn_core::encoder::EncoderConfig;
use camenn_core::metrics::{accuracy, similarity_matrix};
use camenn_core::model::{CameNN, ItemFeatures, ModelConfig};
use camenn_core::moe::{ExpertKind, GatingMode, MoeConfig};
use camenn_core::optim::{changed_params, AdamConfig, AdamState};
use camenn_core::params::ParamStore;
use camenn_core::rng;
use camenn_core::synth::{generate, GeneratorConfig, ItemShape};
use camenn_core::tasks::{CvrHead, LossWeights, Task};
use camenn_core::train::{EvalSets, PreparedData, SplitConfig, StopDecision, TrainConfig, Trainer};
use camenn_core::Tensor;
use proptest::prelude::*;

fn scalar_store(v: f64) -> (ParamStore, camenn_core::ParamId) {
    let mut p = ParamStore::new();
    let id = p.insert("p", Tensor::scalar(v), true).unwrap();
    (p, id)
}

/// One Adam step on `loss = g · p`.
fn linear_step(store: &mut ParamStore, adam: &mut AdamState, id: camenn_core::ParamId, g: f64) {
    let grads = {
        let mut t = Tape::new(store);
        let p = t.param(id);
        let c = t.constant(Tensor::scalar(g));
        let loss = t.mul(c, p).unwrap();
        t.backward(loss).unwrap()
    };
    adam.step(store, &grads).unwrap();
}

#[test]
fn zero_gradient_without_decay_is_a_fixed_point() {
    let (mut p, id) = scalar_store(1.25);
    let mut adam = AdamState::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() }, &p);
    for _ in 0..5 {
        linear_step(&mut p, &mut adam, id, 0.0);
    }
    assert_eq!(p.get(id).item(), 1.25);
    assert_eq!(adam.moments_of(id).unwrap().steps, 5);
}

#[test]
fn two_steps_match_hand_calculation() {
    let cfg = AdamConfig { lr: 0.1, weight_decay: 0.01, ..AdamConfig::default() };
    let (mut p, id) = scalar_store(1.0);
    let mut adam = AdamState::new(cfg, &p);
    linear_step(&mut p, &mut adam, id, 2.0);
    // decay: 1 − 0.1·0.01·1 = 0.999
    // m = 0.05·2 = 0.1, v = 0.001·4 = 0.004, m̂ = 2, v̂ = 4
    let p1 = 0.999 - 0.1 * 2.0 / (2.0 + 1e-8);
    assert!((p.get(id).item() - p1).abs() <= 1e-15);
    linear_step(&mut p, &mut adam, id, -1.0);
    let decayed = p1 - 0.1 * 0.01 * p1;
    let m = 0.95 * 0.1 + 0.05 * -1.0;
    let v = 0.999 * 0.004 + 0.001 * 1.0;
    let mhat = m / (1.0 - 0.95f64 * 0.95);
    let vhat = v / (1.0 - 0.999f64 * 0.999);
    let p2 = decayed - 0.1 * mhat / (vhat.sqrt() + 1e-8);
    assert!((p.get(id).item() - p2).abs() <= 1e-15);
}

#[test]
fn coupled_decay_enters_the_gradient() {
    let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, coupled_decay: true, ..AdamConfig::default() };
    let (mut p, id) = scalar_store(2.0);
    let mut adam = AdamState::new(cfg, &p);
    // effective gradient 0 + 0.5·2 = 1, so the first step is −lr·1/(1+eps)
    linear_step(&mut p, &mut adam, id, 0.0);
    assert!((p.get(id).item() - (2.0 - 0.1 / (1.0 + 1e-8))).abs() <= 1e-15);
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let (mut p, id) = scalar_store(1.0);
    let mut adam = AdamState::new(AdamConfig::default(), &p);
    let grads = {
        let mut t = Tape::new(&p);
        let x = t.param(id);
        let c = t.constant(Tensor::scalar(f64::NAN));
        let l = t.mul(c, x).unwrap();
        t.backward(l).unwrap()
    };
    let err = adam.step(&mut p, &grads).unwrap_err();
    assert!(err.to_string().contains('p'), "{err}");
    assert_eq!(p.get(id).item(), 1.0);
}

#[test]
fn quadratic_loss_decreases_monotonically() {
    let target = [3.0, -2.0, 0.5, 4.0];
    let mut p = ParamStore::new();
    let id = p.insert("x", Tensor::vector(vec![0.0; 4]), true).unwrap();
    let mut adam = AdamState::new(AdamConfig { lr: 0.01, ..AdamConfig::default() }, &p);
    let loss_of = |p: &ParamStore| p.get(id).data().iter().zip(target).map(|(x, c)| (x - c) * (x - c)).sum::<f64>();
    let mut losses = vec![loss_of(&p)];
    for _ in 0..200 {
        let grads = {
            let mut t = Tape::new(&p);
            let x = t.param(id);
            let c = t.constant(Tensor::vector(target.iter().map(|v| -v).collect()));
            let d = t.add(x, c).unwrap();
            let sq = t.mul(d, d).unwrap();
            let l = t.sum(sq);
            t.backward(l).unwrap()
        };
        adam.step(&mut p, &grads).unwrap();
        losses.push(loss_of(&p));
    }
    for w in losses[5..].windows(2) {
        assert!(w[1] < w[0], "{} then {}", w[0], w[1]);
    }
    assert!(losses[200] < 0.5 * losses[0]);
}

#[test]
fn accuracy_matches_direct_count() {
    let mut r = rng::stream(21, 0);
    let scores: Vec<f64> = (0..100).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect();
    let labels: Vec<bool> = (0..100).map(|_| rng::index(&mut r, 2) == 1).collect();
    let mut right = 0;
    for i in 0..100 {
        let predicted = scores[i] >= 0.5;
        if predicted == labels[i] {
            right += 1;
        }
    }
    assert_eq!(accuracy(&scores, &labels, 0.5).unwrap(), right as f64 / 100.0);
}

#[test]
fn similarity_matches_dot_over_norms() {
    let mut r = rng::stream(22, 0);
    let mut vecs = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..7).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect()).collect() };
    let (text, image) = (vecs(6), vecs(6));
    let (m, undefined) = similarity_matrix(&text, &image).unwrap();
    assert!(undefined.is_empty());
    for i in 0..6 {
        for j in 0..6 {
            let dot: f64 = (0..7).map(|c| text[i][c] * image[j][c]).sum();
            let nt = text[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            let ni = image[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((m[i][j] - dot / (nt * ni)).abs() <= 1e-9);
        }
    }
    let e = |k: usize| (0..3).map(|c| if c == k { 2.0 } else { 0.0 }).collect::<Vec<f64>>();
    let (m, undefined) = similarity_matrix(&[e(0), e(1), vec![0.0; 3]], &[e(0), e(2), e(2)]).unwrap();
    assert_eq!(m[0][0], 1.0);
    assert_eq!(m[0][1], 0.0);
    assert_eq!(m[1][2], 0.0);
    assert_eq!(undefined, vec![(2, 0), (2, 1), (2, 2)]);
    assert_eq!(m[2], vec![0.0; 3]);
}

struct Setup {
    data: PreparedData,
    features: Vec<ItemFeatures>,
    validation: EvalSets,
    model: CameNN,
    config: TrainConfig,
}

fn setup(weights: [f64; 3], kind: ExpertKind) -> Setup {
    let seed = 4;
    let shape = ItemShape { image_height: 6, image_width: 6, ..ItemShape::default() };
    let gen = GeneratorConfig { seed, num_concepts: 5, num_items: 40, num_users: 30, num_interactions: 400, shape, ..GeneratorConfig::default() };
    let ds = generate(&gen).unwrap();
    let data = PreparedData::new(&ds, &SplitConfig::default(), 8, seed).unwrap();
    let mc = ModelConfig {
        encoder: EncoderConfig::new(8),
        moe: MoeConfig { num_experts: 2, top_k: 2, expert_kind: kind, gating_mode: GatingMode::Conventional },
        max_text_len: 8,
        max_patch_len: data.max_patch_len(),
        patch_pixels: data.patch_pixels(),
        vocab_size: data.vocab.len(),
        num_users: data.num_users,
        num_contexts: 4,
        cvr_head: CvrHead::MeanPool,
        init_seed: seed,
        provider_seed: seed,
    };
    let model = CameNN::new(mc).unwrap();
    let features = data.features(&model).unwrap();
    let mut config = TrainConfig {
        seed,
        batch_size: 8,
        epochs: 6,
        patience: 2,
        max_steps_per_epoch: Some(4),
        max_eval_rows: Some(60),
        loss_weights: LossWeights(weights),
        num_contexts: 4,
        ..TrainConfig::default()
    };
    config.adam.lr = 3e-3;
    let validation = EvalSets::new(&data.valid_log, &data.align_holdout_items, &config, 17).unwrap();
    Setup { data, features, validation, model, config }
}

fn fit(s: &Setup) -> (Trainer, Vec<camenn_core::train::EpochLog>, Vec<ParamStore>) {
    let mut trainer = Trainer::new(s.model.clone(), s.config).unwrap();
    let mut logs = Vec::new();
    let mut snapshots = Vec::new();
    trainer
        .fit(&s.data, &s.features, &s.validation, |t, l| {
            logs.push(*l);
            snapshots.push(t.model.params.clone());
            Ok(())
        })
        .unwrap();
    (trainer, logs, snapshots)
}

#[test]
fn cvr_only_training_leaves_alignment_parameters_untouched() {
    let s = setup([0.0, 0.0, 1.0], ExpertKind::Transformer);
    let (trainer, _, _) = fit(&s);
    let changed = changed_params(&s.model.params, &trainer.model.params);
    for task in [Task::Ita, Task::Tia] {
        for id in s.model.task_param_ids(task) {
            assert!(!changed.contains(&id), "{} moved", s.model.params.name(id));
            assert!(trainer.adam.moments_of(id).is_none_or(|m| m.steps == 0));
        }
    }
    for id in s.model.task_param_ids(Task::Cvr) {
        assert!(changed.contains(&id), "{} did not move", s.model.params.name(id));
    }
}

#[test]
fn providers_stay_frozen() {
    let s = setup([1.0, 1.0, 1.0], ExpertKind::MlpRelu);
    let (trainer, _, _) = fit(&s);
    let before = s.model.providers().unwrap();
    let after = trainer.model.providers().unwrap();
    assert_eq!(before.text_table, after.text_table);
    assert_eq!(before.image_projection, after.image_projection);
    assert!(!changed_params(&s.model.params, &trainer.model.params).is_empty());
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let s = setup([1.0, 1.0, 1.0], ExpertKind::Recurrent);
    let (trainer, logs, snapshots) = fit(&s);
    let best_epoch = trainer.stopper.best_epoch.unwrap();
    let best = logs[best_epoch].validation.cvr_auc;
    for l in &logs[..=best_epoch] {
        assert!(l.validation.cvr_auc <= best);
    }
    assert_eq!(trainer.best_params.as_ref().unwrap(), &snapshots[best_epoch]);
    let reevaluated = s.validation.evaluate(&trainer.best_model().unwrap(), &s.features).unwrap();
    assert_eq!(reevaluated.cvr_auc, best);
    if trainer.stopped {
        let tail = &logs[best_epoch + 1..];
        assert_eq!(tail.len(), s.config.patience);
        assert!(tail.iter().all(|l| l.decision != StopDecision::Improved));
    }
}

#[test]
fn training_is_bit_deterministic() {
    let s = setup([1.0, 1.0, 1.0], ExpertKind::Transformer);
    let (a, la, _) = fit(&s);
    let (b, lb, _) = fit(&s);
    assert_eq!(la, lb);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.adam, b.adam);
    assert_eq!(a.best_params, b.best_params);
}

proptest! {
    #[test]
    fn stopper_best_dominates_everything_seen(metrics in proptest::collection::vec(0.0f64..1.0, 1..30), patience in 1usize..5) {
        let mut st = camenn_core::train::EarlyStopper::new(patience);
        let mut seen = Vec::new();
        for (e, &m) in metrics.iter().enumerate() {
            let d = st.observe(e, m);
            seen.push(m);
            let best = st.best.unwrap();
            prop_assert!(seen.iter().all(|&x| x <= best));
            prop_assert_eq!(metrics[st.best_epoch.unwrap()], best);
            if d == StopDecision::Stop {
                prop_assert_eq!(e - st.best_epoch.unwrap(), patience);
                break;
            }
        }
    }
}
