use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::objective::{domain_loss, objective_gradients, TaskBatch};
use super::*;
use crate::data::{LabeledSet, UnlabeledSet};
use crate::nn::{Gradients, Graph, ParamGroup, ParamStore, Tensor};

fn tiny_arch() -> ArchConfig {
    ArchConfig { input: [1, 8, 8], convs: vec![ConvLayer { filters: 2, kernel: 3 }], pool: 2, hidden: 4 }
}

fn tiny_cfg(b: Baseline) -> TrainConfig {
    TrainConfig {
        arch: tiny_arch(),
        batch_size: 4,
        epochs: 5,
        learning_rate: 0.05,
        lambda_d0: 0.5,
        lambda_dm: 0.3,
        eval_every: 0,
        ..TrainConfig::baseline(b)
    }
}

fn random_images(rng: &mut ChaCha8Rng, n: usize, offset: f32) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0f32) + offset).collect()).collect()
}

fn labeled(n: usize, seed: u64, offset: f32) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_images(&mut rng, n, offset);
    let loc = (0..n).map(|i| i % 4).collect();
    let sev = (0..n).map(|i| (i * 7) % 5).collect();
    LabeledSet::new(x, vec![loc, sev], [1, 8, 8]).unwrap()
}

fn unlabeled(n: usize, seed: u64, offset: f32) -> UnlabeledSet {
    labeled(n, seed, offset).without_labels()
}

fn tensor(set: &UnlabeledSet) -> Tensor {
    set.batch(&(0..set.len()).collect::<Vec<_>>())
}

fn spec(tasks: Vec<TaskSpec>, mode: Mode, hierarchy: bool) -> ModelSpec {
    ModelSpec { tasks, arch: tiny_arch(), mode, hierarchy }
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
    }
}

fn same_params(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len() && a.ids().all(|id| a.get(id).data() == b.get(id).data())
}

#[test]
fn standard_layout() {
    let spec = ModelSpec { tasks: TaskSpec::bhm(), arch: ArchConfig::standard(), mode: Mode::MultiTask, hierarchy: true };
    let (model, store) = build_model(spec, 3).unwrap();
    assert_eq!(model.flatten_size(), 1250);
    let shape = |n: &str| store.get(store.id(n).unwrap()).shape().to_vec();
    assert_eq!(shape("shared0.conv0.w"), [64, 4, 5, 5]);
    assert_eq!(shape("shared0.conv1.w"), [50, 64, 5, 5]);
    assert_eq!(shape("shared0.conv2.w"), [50, 50, 3, 3]);
    assert_eq!(shape("specific1.w"), [1250, 1250]);
    assert_eq!(shape("predictor0.hidden.w"), [1250, 100]);
    assert_eq!(shape("predictor0.out.w"), [100, 4]);
    assert_eq!(shape("predictor1.out.w"), [100, 5]);
    assert_eq!(shape("domain_shared0.w"), [1250, 2]);
    assert_eq!(shape("domain_task1.w"), [1250, 2]);
    assert!(store.id("specific0.w").is_none() && store.id("domain_task0.w").is_none());
    assert_eq!(ArchConfig::compact().flatten_size().unwrap(), 200);
}

#[test]
fn bad_architecture_is_rejected() {
    let arch = ArchConfig { input: [4, 16, 16], ..ArchConfig::standard() };
    assert!(matches!(arch.flatten_size(), Err(crate::Error::InvalidConfig(_))));
}

#[test]
fn initialization_is_seeded_glorot() {
    let s = spec(TaskSpec::bhm(), Mode::MultiTask, true);
    let (_, a) = build_model(s.clone(), 11).unwrap();
    let (_, b) = build_model(s.clone(), 11).unwrap();
    let (_, c) = build_model(s, 12).unwrap();
    assert!(same_params(&a, &b));
    assert!(!same_params(&a, &c));
    let w = a.get(a.id("shared0.conv0.w").unwrap());
    let bound = (6.0f64 / (9 + 18) as f64).sqrt();
    assert!(w.data().iter().all(|v| v.abs() <= bound));
    assert!(a.get(a.id("shared0.conv0.b").unwrap()).data().iter().all(|&v| v == 0.0));
}

#[test]
fn checkpoint_round_trip_and_layout_check() {
    let dir = tempfile::tempdir().unwrap();
    let (model, store) = build_model(spec(TaskSpec::bhm(), Mode::MultiTask, true), 5).unwrap();
    save_model(dir.path(), &model, &store).unwrap();
    let (loaded, loaded_store) = load_model(dir.path()).unwrap();
    assert_eq!(loaded.spec(), model.spec());
    assert!(same_params(&store, &loaded_store));
    let other = spec(TaskSpec::bhm(), Mode::MultiTask, false);
    assert!(HierModel::bind(other, &store).is_err());
}

fn set_param(store: &mut ParamStore, name: &str, values: &[f64]) {
    let id = store.id(name).unwrap();
    store.get_mut(id).data_mut().copy_from_slice(values);
}

fn zero_param(store: &mut ParamStore, name: &str) {
    let id = store.id(name).unwrap();
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
}

#[test]
fn uniform_heads_give_log_class_count() {
    let (model, mut store) = build_model(spec(TaskSpec::bhm(), Mode::MultiTask, true), 1).unwrap();
    zero_param(&mut store, "predictor0.out.w");
    zero_param(&mut store, "predictor1.out.w");
    let l = task_losses(&model, &store, &labeled(6, 2, 0.0)).unwrap();
    assert!((l[0] - 4f64.ln()).abs() < 1e-12);
    assert!((l[1] - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn task_loss_matches_hand_computation() {
    let (model, mut store) = build_model(spec(TaskSpec::bhm(), Mode::MultiTask, true), 1).unwrap();
    zero_param(&mut store, "predictor0.out.w");
    set_param(&mut store, "predictor0.out.b", &[0.1f64.ln(), 0.2f64.ln(), 0.3f64.ln(), 0.4f64.ln()]);
    zero_param(&mut store, "predictor1.out.w");
    set_param(&mut store, "predictor1.out.b", &[50.0, 0.0, 0.0, 0.0, 0.0]);
    let base = labeled(3, 4, 0.0);
    let set = base.without_labels().with_labels(vec![vec![0, 2, 3], vec![0, 0, 0]]).unwrap();
    let l = task_losses(&model, &store, &set).unwrap();
    let expected = -(0.1f64.ln() + 0.3f64.ln() + 0.4f64.ln()) / 3.0;
    assert!((l[0] - expected).abs() < 1e-12);
    assert!(l[1] < 1e-12, "near-perfect head gives {}", l[1]);
    let bad = base.without_labels().with_labels(vec![vec![0, 4, 1], vec![0, 0, 0]]).unwrap();
    assert!(matches!(task_losses(&model, &store, &bad), Err(crate::Error::LabelOutOfRange { label: 4, classes: 4 })));
}

#[test]
fn domain_loss_cases() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let half = g.input(Tensor::filled(&[3, 2], 0.5));
    let l = domain_loss(&mut g, half, half).unwrap();
    assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-12);

    let s = g.input(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap());
    let t = g.input(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
    let l = domain_loss(&mut g, s, t).unwrap();
    assert!(g.value(l).item() < 1e-12);

    // One source and one target sample: -ln p_s[1] - ln p_t[0].
    let s = g.input(Tensor::new(&[1, 2], vec![0.35, 0.65]).unwrap());
    let t = g.input(Tensor::new(&[1, 2], vec![0.8, 0.2]).unwrap());
    let l = domain_loss(&mut g, s, t).unwrap();
    assert!((g.value(l).item() - (-(0.65f64).ln() - 0.8f64.ln())).abs() < 1e-12);
}

#[test]
fn untrained_domain_classifier_at_chance() {
    let (model, mut store) = build_model(spec(TaskSpec::bhm(), Mode::MultiTask, true), 1).unwrap();
    zero_param(&mut store, "domain_shared0.w");
    zero_param(&mut store, "domain_task1.w");
    let x = tensor(&unlabeled(4, 9, 0.0));
    let d = domain_losses(&model, &store, &x, &x).unwrap();
    for l in d.shared.iter().chain(d.specific.iter().flatten()) {
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
    }
    assert_eq!(d.specific[0], None);
}

#[test]
fn adaptive_weight_cases() {
    assert_close(&adaptive_weights(&[0.7, 0.7, 0.7]), &[1.0 / 3.0; 3], 1e-15);
    assert_eq!(adaptive_weights(&[3.2]), vec![1.0]);
    let w = adaptive_weights(&[0.2, 0.9]);
    // Two-way softmax of (-0.2, -0.9) is the logistic of the gap 0.7.
    let w1 = 1.0 / (1.0 + (-0.7f64).exp());
    assert!((w[0] - w1).abs() < 1e-12 && (w[1] - (1.0 - w1)).abs() < 1e-12);
    assert!((w[0] - 0.668).abs() < 1e-3 && (w[1] - 0.332).abs() < 1e-3);
}

#[test]
fn objective_weight_variants() {
    assert_eq!(objective_weights(Objective::HardMax, &[0.9, 0.2, 0.5]), vec![0.0, 1.0, 0.0]);
    assert_eq!(objective_weights(Objective::Average, &[0.9, 0.2]), vec![0.5, 0.5]);
    assert_eq!(objective_weights(Objective::NoAdaptation, &[0.9, 0.2]), vec![0.0, 0.0]);
    for o in [Objective::HardMax, Objective::Average, Objective::SoftMax] {
        assert_eq!(objective_weights(o, &[1.7]), vec![1.0]);
    }
}

proptest! {
    #[test]
    fn adaptive_weights_form_a_distribution(losses in proptest::collection::vec(0.0f64..3.0, 1..8)) {
        let w = adaptive_weights(&losses);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        if losses.len() > 1 {
            prop_assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn adaptive_weight_falls_with_own_loss(losses in proptest::collection::vec(0.0f64..3.0, 2..6), k in 0usize..6, bump in 0.01f64..2.0) {
        let k = k % losses.len();
        let mut raised = losses.clone();
        raised[k] += bump;
        prop_assert!(adaptive_weights(&raised)[k] < adaptive_weights(&losses)[k]);
    }
}

/// Source and target batches for every task, drawn from fixed seeds.
fn step_batches(model: &HierModel, shared_batches: bool) -> Vec<TaskBatch> {
    (0..model.n_tasks())
        .map(|m| {
            let seed = if shared_batches { 0 } else { m as u64 };
            let s = labeled(3, 20 + seed, 0.0);
            TaskBatch {
                source: tensor(&s.without_labels()),
                labels: s.labels(m).to_vec(),
                target: Some(tensor(&unlabeled(3, 40 + seed, 0.4))),
                source_condition: None,
            }
        })
        .collect()
}

fn grads_of(store: &ParamStore, grads: &Gradients, group: impl Fn(ParamGroup) -> bool) -> Vec<f64> {
    store
        .ids()
        .filter(|&id| group(store.group(id)))
        .flat_map(|id| grads.get(id).map_or_else(|| vec![0.0; store.get(id).len()], <[f64]>::to_vec))
        .collect()
}

/// Gradient of task `m`'s task-shared domain loss, built without gradient reversal.
fn plain_domain_grad(model: &HierModel, store: &ParamStore, b: &TaskBatch) -> (f64, Gradients) {
    let mut g = Graph::new(store);
    let xs = g.input(b.source.clone());
    let xt = g.input(b.target.clone().unwrap());
    let zs = model.shared_features(&mut g, 0, xs).unwrap();
    let zt = model.shared_features(&mut g, 0, xt).unwrap();
    let (w, bias) = (g.param_by_name("domain_shared0.w").unwrap(), g.param_by_name("domain_shared0.b").unwrap());
    let ls = g.dense(zs, w, bias).unwrap();
    let lt = g.dense(zt, w, bias).unwrap();
    let ps = g.softmax(ls).unwrap();
    let pt = g.softmax(lt).unwrap();
    let l = domain_loss(&mut g, ps, pt).unwrap();
    let value = g.value(l).item();
    (value, g.backward(l).unwrap())
}

#[test]
fn soft_max_gradient_decomposes_into_weighted_task_gradients() {
    let tasks = vec![TaskSpec::new("a", 4, Difficulty::Easy), TaskSpec::new("b", 5, Difficulty::Easy)];
    let (model, store) = build_model(spec(tasks, Mode::MultiTask, false), 8).unwrap();
    let batches = step_batches(&model, false);
    let cfg = TrainConfig { lambda_d0: 0.7, ..tiny_cfg(Baseline::Mud) };
    let soft = TrainConfig { objective: Objective::SoftMax, ..cfg.clone() };
    let (losses, full) = objective_gradients(&model, &store, &soft, &[0, 1], &batches).unwrap();
    let noadapt = TrainConfig { objective: Objective::NoAdaptation, ..cfg.clone() };
    let (_, task_only) = objective_gradients(&model, &store, &noadapt, &[0, 1], &batches).unwrap();
    let (l1, g1) = plain_domain_grad(&model, &store, &batches[0]);
    let (l2, g2) = plain_domain_grad(&model, &store, &batches[1]);
    assert!((losses.shared_domain[0].unwrap() - l1).abs() < 1e-12);
    assert!((losses.shared_domain[1].unwrap() - l2).abs() < 1e-12);
    let w = adaptive_weights(&[l1, l2]);
    assert_eq!(losses.weights, vec![Some(w[0]), Some(w[1])]);

    let extractor = |g: ParamGroup| matches!(g, ParamGroup::SharedExtractor(_));
    let classifier = |g: ParamGroup| matches!(g, ParamGroup::SharedDomain(_));
    let (t, a, b) = (grads_of(&store, &task_only, extractor), grads_of(&store, &g1, extractor), grads_of(&store, &g2, extractor));
    let expected: Vec<f64> = (0..t.len()).map(|i| t[i] - 0.7 * (w[0] * a[i] + w[1] * b[i])).collect();
    assert_close(&grads_of(&store, &full, extractor), &expected, 1e-10);
    let (a, b) = (grads_of(&store, &g1, classifier), grads_of(&store, &g2, classifier));
    let expected: Vec<f64> = (0..a.len()).map(|i| 0.7 * (w[0] * a[i] + w[1] * b[i])).collect();
    assert_close(&grads_of(&store, &full, classifier), &expected, 1e-10);
}

#[test]
fn hard_max_routes_through_the_most_divergent_task_only() {
    let tasks = vec![TaskSpec::new("a", 4, Difficulty::Easy), TaskSpec::new("b", 5, Difficulty::Easy)];
    let (model, store) = build_model(spec(tasks, Mode::MultiTask, false), 8).unwrap();
    let batches = step_batches(&model, false);
    let cfg = TrainConfig { objective: Objective::HardMax, ..tiny_cfg(Baseline::Mud) };
    let (losses, full) = objective_gradients(&model, &store, &cfg, &[0, 1], &batches).unwrap();
    let (l1, g1) = plain_domain_grad(&model, &store, &batches[0]);
    let (l2, g2) = plain_domain_grad(&model, &store, &batches[1]);
    let (k, gk) = if l1 <= l2 { (0, g1) } else { (1, g2) };
    assert_eq!(losses.weights[k], Some(1.0));
    let classifier = |g: ParamGroup| matches!(g, ParamGroup::SharedDomain(_));
    let expected: Vec<f64> = grads_of(&store, &gk, classifier).iter().map(|v| cfg.lambda_d0 * v).collect();
    assert_close(&grads_of(&store, &full, classifier), &expected, 1e-10);
}

#[test]
fn predictor_gradients_do_not_depend_on_the_variant() {
    let (model, store) = build_model(spec(TaskSpec::bhm(), Mode::MultiTask, true), 2).unwrap();
    let batches = step_batches(&model, false);
    let predictor = |g: ParamGroup| matches!(g, ParamGroup::Predictor(_));
    let reference = {
        let cfg = TrainConfig { objective: Objective::NoAdaptation, ..tiny_cfg(Baseline::HierMud) };
        grads_of(&store, &objective_gradients(&model, &store, &cfg, &[0, 1], &batches).unwrap().1, predictor)
    };
    for o in [Objective::HardMax, Objective::Average, Objective::SoftMax] {
        let cfg = TrainConfig { objective: o, ..tiny_cfg(Baseline::HierMud) };
        let (_, g) = objective_gradients(&model, &store, &cfg, &[0, 1], &batches).unwrap();
        assert_eq!(grads_of(&store, &g, predictor), reference);
    }
}

#[test]
fn equal_domain_losses_make_soft_max_match_average() {
    let tasks = vec![TaskSpec::new("a", 4, Difficulty::Easy), TaskSpec::new("b", 4, Difficulty::Easy)];
    let (model, store) = build_model(spec(tasks, Mode::MultiTask, false), 3).unwrap();
    let mut batches = step_batches(&model, true);
    batches[1].labels = batches[0].labels.clone();
    let soft = TrainConfig { objective: Objective::SoftMax, ..tiny_cfg(Baseline::Mud) };
    let avg = TrainConfig { objective: Objective::Average, ..tiny_cfg(Baseline::Mud) };
    let (ls, gs) = objective_gradients(&model, &store, &soft, &[0, 1], &batches).unwrap();
    let (_, ga) = objective_gradients(&model, &store, &avg, &[0, 1], &batches).unwrap();
    assert_eq!(ls.shared_domain[0], ls.shared_domain[1]);
    let all = |_: ParamGroup| true;
    assert_close(&grads_of(&store, &gs, all), &grads_of(&store, &ga, all), 1e-14);
}

#[test]
fn single_task_variants_share_gradients() {
    let tasks = vec![TaskSpec::new("only", 3, Difficulty::Hard)];
    let (model, store) = build_model(spec(tasks, Mode::MultiTask, true), 4).unwrap();
    let mut batches = step_batches(&model, false);
    batches[0].labels = vec![0, 1, 2];
    let all = |_: ParamGroup| true;
    let grads: Vec<Vec<f64>> = [Objective::HardMax, Objective::Average, Objective::SoftMax]
        .into_iter()
        .map(|o| {
            let cfg = TrainConfig { objective: o, ..tiny_cfg(Baseline::HierMud) };
            grads_of(&store, &objective_gradients(&model, &store, &cfg, &[0], &batches).unwrap().1, all)
        })
        .collect();
    assert_eq!(grads[0], grads[1]);
    assert_eq!(grads[1], grads[2]);
}

#[test]
fn domain_loss_reaches_extractor_reversed() {
    let (model, store) = build_model(spec(TaskSpec::bhm(), Mode::MultiTask, false), 6).unwrap();
    let batches = step_batches(&model, false);
    let (_, plain) = plain_domain_grad(&model, &store, &batches[0]);
    for lambda in [1.0, 0.3] {
        let mut g = Graph::new(&store);
        let xs = g.input(batches[0].source.clone());
        let xt = g.input(batches[0].target.clone().unwrap());
        let zs = model.shared_features(&mut g, 0, xs).unwrap();
        let zt = model.shared_features(&mut g, 0, xt).unwrap();
        let ps = model.shared_domain_probs(&mut g, 0, zs, lambda).unwrap();
        let pt = model.shared_domain_probs(&mut g, 0, zt, lambda).unwrap();
        let l = domain_loss(&mut g, ps, pt).unwrap();
        let reversed = g.backward(l).unwrap();
        let ext = |g: ParamGroup| matches!(g, ParamGroup::SharedExtractor(_));
        let expected: Vec<f64> = grads_of(&store, &plain, ext).iter().map(|v| -lambda * v).collect();
        assert_close(&grads_of(&store, &reversed, ext), &expected, 1e-14);
        let cls = |g: ParamGroup| g == ParamGroup::SharedDomain(0);
        assert_close(&grads_of(&store, &reversed, cls), &grads_of(&store, &plain, cls), 1e-14);
    }
}

#[test]
fn mcnn_ignores_target_and_never_moves_domain_classifiers() {
    let cfg = tiny_cfg(Baseline::Mcnn);
    let source = labeled(12, 1, 0.0);
    let a = train(&TaskSpec::bhm(), &source, &unlabeled(10, 2, 0.5), &cfg, None).unwrap();
    let b = train(&TaskSpec::bhm(), &source, &unlabeled(7, 3, -0.5), &cfg, None).unwrap();
    let c = train(&TaskSpec::bhm(), &source, &UnlabeledSet::empty([1, 8, 8]), &cfg, None).unwrap();
    assert!(same_params(&a.store, &b.store) && same_params(&a.store, &c.store));
    let (_, init) = build_model(cfg.model_spec(&TaskSpec::bhm()), cfg.seed).unwrap();
    for id in init.ids().filter(|&id| init.group(id).is_domain_classifier()) {
        assert_eq!(init.get(id).data(), a.store.get(id).data());
    }
    assert!(a.history.iter().all(|r| r.shared_domain_loss.iter().all(Option::is_none)));
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_cfg(Baseline::HierMud);
    let run = || train(&TaskSpec::bhm(), &labeled(12, 1, 0.0), &unlabeled(10, 2, 0.5), &cfg, None).unwrap();
    let (a, b) = (run(), run());
    assert!(same_params(&a.store, &b.store));
    let mut ca = Vec::new();
    let mut cb = Vec::new();
    a.store.write_checkpoint(&mut ca).unwrap();
    b.store.write_checkpoint(&mut cb).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(a.history, b.history);
}

#[test]
fn single_task_objectives_share_trajectories() {
    let tasks = vec![TaskSpec::new("location", 4, Difficulty::Easy)];
    let source = labeled(12, 1, 0.0).select_tasks(&[0]);
    let target = unlabeled(10, 2, 0.5);
    let stores: Vec<ParamStore> = [Objective::HardMax, Objective::Average, Objective::SoftMax]
        .into_iter()
        .map(|o| train(&tasks, &source, &target, &TrainConfig { objective: o, ..tiny_cfg(Baseline::Mud) }, None).unwrap().store)
        .collect();
    assert!(same_params(&stores[0], &stores[1]) && same_params(&stores[1], &stores[2]));
    let iud = train(&tasks, &source, &target, &tiny_cfg(Baseline::Iud), None).unwrap().store;
    assert!(same_params(&iud, &stores[1]));
}

#[test]
fn divergent_learning_rate_aborts() {
    let cfg = TrainConfig { learning_rate: 1e3, epochs: 50, ..tiny_cfg(Baseline::HierMud) };
    let r = train(&TaskSpec::bhm(), &labeled(12, 1, 0.0), &unlabeled(10, 2, 0.5), &cfg, None);
    assert!(matches!(r, Err(crate::Error::Diverged { .. })), "got {:?}", r.err());
}

#[test]
fn sequential_training_freezes_earlier_tasks() {
    let cfg = tiny_cfg(Baseline::Sud);
    let tasks = TaskSpec::bhm();
    let source = labeled(12, 1, 0.0);
    let target = unlabeled(10, 2, 0.5);
    let full = train(&tasks, &source, &target, &cfg, None).unwrap();
    assert_eq!(full.history.len(), 2 * cfg.epochs);
    assert_eq!(full.history[cfg.epochs].phase, 1);
    assert!(full.history[..cfg.epochs].iter().all(|r| r.task_loss[1].is_none()));
    assert_eq!(full.store.get(full.store.id("predictor1.hidden.w").unwrap()).shape(), [18 + 4, 4]);
    // Phase one on its own: stopping after it must leave task 0 exactly as in the full run.
    let (model, init) = build_model(cfg.model_spec(&tasks), cfg.seed).unwrap();
    let first = super::train::train_model(model, init, &source, &target, &TrainConfig { mode: Mode::Sequential, ..cfg.clone() }, None)
        .unwrap();
    for id in full.store.ids() {
        if matches!(full.store.group(id), ParamGroup::SharedExtractor(0) | ParamGroup::Predictor(0) | ParamGroup::SharedDomain(0)) {
            assert_eq!(full.store.get(id).data(), first.store.get(id).data());
        }
    }
    let p = predict_target(&full.model, &full.store, &target).unwrap();
    assert_eq!(p.len(), target.len());
}

#[test]
fn detection_follows_location_class() {
    let (model, mut store) = build_model(spec(TaskSpec::bhm(), Mode::MultiTask, true), 1).unwrap();
    zero_param(&mut store, "predictor0.out.w");
    set_param(&mut store, "predictor0.out.b", &[30.0, 0.0, 0.0, 0.0]);
    zero_param(&mut store, "predictor1.out.w");
    set_param(&mut store, "predictor1.out.b", &[0.0, 0.0, 30.0, 0.0, 0.0]);
    let x = unlabeled(5, 3, 0.0);
    for p in predict_target(&model, &store, &x).unwrap() {
        assert_eq!(p, Prediction { location: 0, severity: 0, detected: false });
    }
    set_param(&mut store, "predictor0.out.b", &[0.0, 0.0, 30.0, 0.0]);
    for p in predict_target(&model, &store, &x).unwrap() {
        assert_eq!(p, Prediction { location: 2, severity: 2, detected: true });
    }
}

#[test]
fn trained_predictions_are_reproducible() {
    let cfg = tiny_cfg(Baseline::HierMud);
    let run = || {
        let out = train(&TaskSpec::bhm(), &labeled(12, 1, 0.0), &unlabeled(10, 2, 0.5), &cfg, None).unwrap();
        predict_classes(&out.model, &out.store, &unlabeled(10, 77, 0.1)).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn history_records_metrics_and_writes_csv() {
    let cfg = TrainConfig { eval_every: 2, ..tiny_cfg(Baseline::HierMud) };
    let eval = labeled(8, 5, 0.5);
    let out = train(&TaskSpec::bhm(), &labeled(12, 1, 0.0), &eval.without_labels(), &cfg, Some(&eval)).unwrap();
    let with: Vec<usize> = out.history.iter().filter(|r| r.metrics.is_some()).map(|r| r.epoch).collect();
    assert_eq!(with, vec![2, 4, 5]);
    let r = &out.history[0];
    assert!(r.task_domain_loss[1].is_some() && r.task_domain_loss[0].is_none());
    let w: f64 = r.weight.iter().flatten().sum();
    assert!((w - 1.0).abs() < 1e-12);
    let mut buf = Vec::new();
    write_history_csv(&mut buf, &TaskSpec::bhm(), &out.history).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("epoch,phase,objective,loss_location,"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn adaptation_requires_a_target() {
    let r = train(&TaskSpec::bhm(), &labeled(8, 1, 0.0), &UnlabeledSet::empty([1, 8, 8]), &tiny_cfg(Baseline::Mud), None);
    assert!(matches!(r, Err(crate::Error::MissingData(_))));
}

fn normal_cdf_by_quadrature(x: f64) -> f64 {
    // Simpson's rule on the density from -12 to x.
    let (a, n) = (-12.0, 20_000);
    let h = (x - a) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let inner: f64 = (1..n).map(|i| pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    h / 3.0 * (pdf(a) + inner + pdf(x))
}

#[test]
fn divergence_proxy_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let same: Vec<Vec<f64>> = (0..200).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    assert!(divergence_proxy(&same, &same).unwrap() < 0.1);

    let apart: Vec<Vec<f64>> = same.iter().map(|r| r.iter().map(|v| v + 10.0).collect()).collect();
    assert!((divergence_proxy(&same, &apart).unwrap() - 2.0).abs() < 1e-12);

    use rand_distr::{Distribution, Normal};
    let n = 2000;
    let s: Vec<Vec<f64>> = (0..n).map(|_| vec![Normal::new(0.0, 1.0).unwrap().sample(&mut rng)]).collect();
    let t: Vec<Vec<f64>> = (0..n).map(|_| vec![Normal::new(2.0, 1.0).unwrap().sample(&mut rng)]).collect();
    // Bayes threshold at 1: each domain errs with probability Φ(-1).
    let bayes = 2.0 * (1.0 - 2.0 * normal_cdf_by_quadrature(-1.0));
    let d = divergence_proxy(&s, &t).unwrap();
    assert!((d - bayes).abs() < 0.05, "d = {d}, Bayes value {bayes}");
    assert!(divergence_proxy(&s, &t[..10]).is_err());
}

#[test]
fn easy_hard_split() {
    assert_eq!(split_by_accuracy(&[0.9, 0.6, 0.75], 0.75), vec![Difficulty::Easy, Difficulty::Hard, Difficulty::Easy]);
}

#[test]
fn baseline_names_round_trip() {
    for b in Baseline::ALL {
        assert_eq!(Baseline::parse(b.name()), Some(b));
    }
    assert_eq!(Baseline::parse("hiermud_a"), Some(Baseline::HierMudA));
    assert_eq!(Baseline::parse("nope"), None);
}
