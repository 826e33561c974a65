use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{build_model, HierModel, ModelSpec};
use super::objective::{objective_gradients, TaskBatch};
use super::{Mode, TaskSpec, TrainConfig};
use crate::data::{LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::evalrep::{accuracy, f1_binary};
use crate::nn::{sgd_step, Graph, ParamStore, Tensor, PROB_FLOOR};

/// Rows pushed through the network at once outside training.
const CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMetrics {
    /// Accuracy per task after the consistency rule.
    pub task_accuracy: Vec<f64>,
    /// F1 of "damaged" (task 0 class ≠ 0) against the task 0 labels.
    pub detection_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Task being trained in sequential mode; 0 otherwise.
    pub phase: usize,
    pub objective: f64,
    pub task_loss: Vec<Option<f64>>,
    pub shared_domain_loss: Vec<Option<f64>>,
    pub task_domain_loss: Vec<Option<f64>>,
    pub weight: Vec<Option<f64>>,
    pub metrics: Option<TargetMetrics>,
}

pub struct TrainOutput {
    pub model: HierModel,
    pub store: ParamStore,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub location: usize,
    pub severity: usize,
    pub detected: bool,
}

impl TrainConfig {
    pub fn model_spec(&self, tasks: &[TaskSpec]) -> ModelSpec {
        ModelSpec { tasks: tasks.to_vec(), arch: self.arch.clone(), mode: self.mode, hierarchy: self.hierarchy }
    }
}

/// Builds a model from `cfg.seed` and trains it.
///
/// `target` is only sampled when the objective adapts. `eval` supplies target
/// labels for the metrics in the history and never reaches the updates.
pub fn train(
    tasks: &[TaskSpec],
    source: &LabeledSet,
    target: &UnlabeledSet,
    cfg: &TrainConfig,
    eval: Option<&LabeledSet>,
) -> Result<TrainOutput> {
    cfg.validate(tasks)?;
    let (model, store) = build_model(cfg.model_spec(tasks), cfg.seed)?;
    train_model(model, store, source, target, cfg, eval)
}

/// Trains an already built model; its layout must match `cfg`.
pub fn train_model(
    model: HierModel,
    mut store: ParamStore,
    source: &LabeledSet,
    target: &UnlabeledSet,
    cfg: &TrainConfig,
    eval: Option<&LabeledSet>,
) -> Result<TrainOutput> {
    cfg.validate(model.tasks())?;
    if model.spec() != &cfg.model_spec(model.tasks()) {
        return Err(Error::InvalidConfig("model layout does not match the training configuration".into()));
    }
    if source.is_empty() {
        return Err(Error::MissingData("source set is empty".into()));
    }
    if source.n_tasks() != model.n_tasks() {
        return Err(Error::Shape(format!("source has {} label sets for {} tasks", source.n_tasks(), model.n_tasks())));
    }
    if source.shape() != cfg.arch.input {
        return Err(Error::Shape(format!("source samples are {:?}, model expects {:?}", source.shape(), cfg.arch.input)));
    }
    if cfg.adapts() {
        if target.is_empty() {
            return Err(Error::MissingData("target set is empty".into()));
        }
        if target.shape() != cfg.arch.input {
            return Err(Error::Shape(format!("target samples are {:?}, model expects {:?}", target.shape(), cfg.arch.input)));
        }
    }

    let phases: Vec<Vec<usize>> = match cfg.mode {
        Mode::Sequential => (0..model.n_tasks()).map(|m| vec![m]).collect(),
        _ => vec![(0..model.n_tasks()).collect()],
    };
    let total = phases.len() * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut history = Vec::with_capacity(total);
    let mut epoch = 0;
    for active in &phases {
        for _ in 0..cfg.epochs {
            epoch += 1;
            let mut batches: Vec<Option<TaskBatch>> = (0..model.n_tasks()).map(|_| None).collect();
            for &m in active {
                let si = sample(&mut rng, source.len(), cfg.batch_size.min(source.len())).into_vec();
                let ti = cfg.adapts().then(|| sample(&mut rng, target.len(), cfg.batch_size.min(target.len())).into_vec());
                let xs = source.batch(&si);
                let xt = ti.map(|ti| target.batch(&ti));
                let condition = |x: &Tensor| -> Result<Option<Tensor>> {
                    if model.condition_width(m) == 0 {
                        return Ok(None);
                    }
                    let probs = probs_upto(&model, &store, x, m)?;
                    Ok(Some(one_hot_condition(&probs)?))
                };
                batches[m] = Some(TaskBatch {
                    source_condition: condition(&xs)?,
                    labels: si.iter().map(|&i| source.labels(m)[i]).collect(),
                    source: xs,
                    target: xt,
                });
            }
            let batches: Vec<TaskBatch> = batches.into_iter().map(|b| b.unwrap_or_else(TaskBatch::empty)).collect();
            let (losses, grads) = objective_gradients(&model, &store, cfg, active, &batches)?;
            if !losses.objective.is_finite() {
                return Err(Error::Diverged { step: epoch, what: "objective".into() });
            }
            // Every sample of the batch below the probability floor: the
            // unclipped loss would be -ln 0.
            let ceiling = -PROB_FLOOR.ln() * (1.0 - 1e-12);
            if let Some(m) = losses.task.iter().position(|l| l.is_some_and(|l| !l.is_finite() || l >= ceiling)) {
                return Err(Error::Diverged { step: epoch, what: format!("loss of task {}", model.tasks()[m].name) });
            }
            if !grads.is_finite() {
                return Err(Error::Diverged { step: epoch, what: "gradient".into() });
            }
            sgd_step(&mut store, &grads, cfg.learning_rate)?;
            if store.iter().any(|(_, p)| p.value.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { step: epoch, what: "parameters".into() });
            }
            let due = epoch == total || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
            let metrics = match eval {
                Some(set) if due => Some(evaluate(&model, &store, set)?),
                _ => None,
            };
            log::debug!("epoch {epoch}: objective {:.5}", losses.objective);
            history.push(EpochRecord {
                epoch,
                phase: if cfg.mode == Mode::Sequential { active[0] } else { 0 },
                objective: losses.objective,
                task_loss: losses.task,
                shared_domain_loss: losses.shared_domain,
                task_domain_loss: losses.task_domain,
                weight: losses.weights,
                metrics,
            });
        }
    }
    Ok(TrainOutput { model, store, history })
}

impl TaskBatch {
    fn empty() -> Self {
        TaskBatch { source: Tensor::zeros(&[0]), labels: Vec::new(), target: None, source_condition: None }
    }
}

/// Probabilities of tasks `0..upto` for images `x`, feeding earlier
/// predictions forward in sequential mode.
fn probs_upto(model: &HierModel, store: &ParamStore, x: &Tensor, upto: usize) -> Result<Vec<Tensor>> {
    let n = x.shape()[0];
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); upto];
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        let mut g = Graph::new(store);
        let xv = g.input(x.rows(start, len)?);
        let mut features = vec![None; model.n_extractors()];
        let mut chunk_probs: Vec<Tensor> = Vec::with_capacity(upto);
        for m in 0..upto {
            let e = model.extractor_of(m);
            let z = match features[e] {
                Some(z) => z,
                None => {
                    let z = model.shared_features(&mut g, e, xv)?;
                    features[e] = Some(z);
                    z
                }
            };
            let h = model.head_features(&mut g, m, z)?;
            let cond = if model.condition_width(m) > 0 {
                Some(g.input(one_hot_condition(&chunk_probs)?))
            } else {
                None
            };
            let p = model.predictor_probs(&mut g, m, h, cond)?;
            chunk_probs.push(g.value(p).clone());
        }
        for (acc, p) in out.iter_mut().zip(chunk_probs) {
            acc.extend_from_slice(p.data());
        }
        start += len;
    }
    out.into_iter()
        .enumerate()
        .map(|(m, data)| Tensor::new(&[n, model.tasks()[m].n_classes], data))
        .collect()
}

/// Class probabilities of every task.
pub(crate) fn all_probs(model: &HierModel, store: &ParamStore, x: &Tensor) -> Result<Vec<Tensor>> {
    probs_upto(model, store, x, model.n_tasks())
}

fn argmax_rows(p: &Tensor) -> Vec<usize> {
    let c = p.shape()[1];
    p.data()
        .chunks(c)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

/// Concatenated one-hot argmax rows of each probability tensor.
fn one_hot_condition(probs: &[Tensor]) -> Result<Tensor> {
    let n = probs.first().map_or(0, |p| p.shape()[0]);
    let width: usize = probs.iter().map(|p| p.shape()[1]).sum();
    let mut data = vec![0.0; n * width];
    let mut offset = 0;
    for p in probs {
        for (i, k) in argmax_rows(p).into_iter().enumerate() {
            data[i * width + offset + k] = 1.0;
        }
        offset += p.shape()[1];
    }
    Tensor::new(&[n, width], data)
}

fn all_rows(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Arg-max class per task, with the undamaged consistency rule: when task 0
/// predicts class 0, task 1 is forced to class 0.
pub fn predict_classes(model: &HierModel, store: &ParamStore, inputs: &UnlabeledSet) -> Result<Vec<Vec<usize>>> {
    if inputs.is_empty() {
        return Ok(vec![Vec::new(); model.n_tasks()]);
    }
    let x = inputs.batch(&all_rows(inputs.len()));
    let mut classes: Vec<Vec<usize>> = all_probs(model, store, &x)?.iter().map(argmax_rows).collect();
    if classes.len() >= 2 {
        let (loc, rest) = classes.split_at_mut(1);
        for (l, s) in loc[0].iter().zip(rest[0].iter_mut()) {
            if *l == 0 {
                *s = 0;
            }
        }
    }
    Ok(classes)
}

/// Location, severity and detection flag for each target sample.
pub fn predict_target(model: &HierModel, store: &ParamStore, inputs: &UnlabeledSet) -> Result<Vec<Prediction>> {
    if model.n_tasks() != 2 {
        return Err(Error::InvalidConfig(format!("target prediction needs location and severity heads, model has {} tasks", model.n_tasks())));
    }
    let classes = predict_classes(model, store, inputs)?;
    Ok(classes[0]
        .iter()
        .zip(&classes[1])
        .map(|(&location, &severity)| Prediction { location, severity, detected: location != 0 })
        .collect())
}

pub(crate) fn evaluate(model: &HierModel, store: &ParamStore, set: &LabeledSet) -> Result<TargetMetrics> {
    let classes = predict_classes(model, store, &set.without_labels())?;
    let task_accuracy = classes.iter().enumerate().map(|(m, c)| accuracy(c, set.labels(m))).collect();
    let flag = |c: &[usize]| c.iter().map(|&k| k != 0).collect::<Vec<bool>>();
    let detection_f1 = f1_binary(&flag(&classes[0]), &flag(set.labels(0)));
    Ok(TargetMetrics { task_accuracy, detection_f1 })
}

/// Flattened output of task-shared extractor `e`, one row per sample.
pub fn shared_features(model: &HierModel, store: &ParamStore, e: usize, inputs: &UnlabeledSet) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(inputs.len());
    for start in (0..inputs.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(inputs.len())).collect();
        let mut g = Graph::new(store);
        let x = g.input(inputs.batch(&idx));
        let z = model.shared_features(&mut g, e, x)?;
        rows.extend(g.value(z).data().chunks(model.flatten_size()).map(<[f64]>::to_vec));
    }
    Ok(rows)
}

/// Accuracy of extractor `e`'s domain classifier on precomputed features,
/// with source as class 1 and target as class 0.
pub fn domain_accuracy(model: &HierModel, store: &ParamStore, e: usize, source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    let flat = model.flatten_size();
    let mut predicted = Vec::new();
    for set in [source, target] {
        if set.iter().any(|r| r.len() != flat) {
            return Err(Error::Shape(format!("features must have {flat} columns")));
        }
        if set.is_empty() {
            continue;
        }
        let mut g = Graph::new(store);
        let z = g.input(Tensor::new(&[set.len(), flat], set.concat())?);
        let p = model.shared_domain_probs(&mut g, e, z, 1.0)?;
        predicted.extend(argmax_rows(g.value(p)));
    }
    let truth: Vec<usize> = source.iter().map(|_| 1).chain(target.iter().map(|_| 0)).collect();
    Ok(accuracy(&predicted, &truth))
}

/// One row per epoch; empty cells where a term does not apply.
pub fn write_history_csv<W: Write>(w: W, tasks: &[TaskSpec], history: &[EpochRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["epoch".to_string(), "phase".into(), "objective".into()];
    for t in tasks {
        for col in ["loss", "domain_shared", "domain_specific", "weight", "target_accuracy"] {
            header.push(format!("{col}_{}", t.name));
        }
    }
    header.push("target_detection_f1".into());
    out.write_record(&header)?;
    let cell = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.8}"));
    for r in history {
        let mut row = vec![r.epoch.to_string(), r.phase.to_string(), cell(Some(r.objective))];
        for m in 0..tasks.len() {
            row.push(cell(r.task_loss[m]));
            row.push(cell(r.shared_domain_loss[m]));
            row.push(cell(r.task_domain_loss[m]));
            row.push(cell(r.weight[m]));
            row.push(cell(r.metrics.as_ref().map(|x| x.task_accuracy[m])));
        }
        row.push(cell(r.metrics.as_ref().map(|x| x.detection_f1)));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
