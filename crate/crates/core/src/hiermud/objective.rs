use super::model::HierModel;
use super::train::all_probs;
use super::{Difficulty, Objective, TrainConfig};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nn::{kernels, Gradients, Graph, ParamStore, Tensor, Var};

/// Softmax of the negated domain losses: a smaller loss means the domains are
/// easier to tell apart, so that task gets more weight.
pub fn adaptive_weights(domain_losses: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = domain_losses.iter().map(|l| -l).collect();
    kernels::softmax_rows(&neg, neg.len().max(1))
}

/// Per-task weights on the task-shared adversarial term.
pub fn objective_weights(objective: Objective, domain_losses: &[f64]) -> Vec<f64> {
    let m = domain_losses.len();
    match objective {
        Objective::NoAdaptation => vec![0.0; m],
        Objective::Average => vec![1.0 / m as f64; m],
        Objective::SoftMax => adaptive_weights(domain_losses),
        Objective::HardMax => {
            let mut w = vec![0.0; m];
            let best = domain_losses
                .iter()
                .enumerate()
                .fold(0, |best, (i, &l)| if l < domain_losses[best] { i } else { best });
            if m > 0 {
                w[best] = 1.0;
            }
            w
        }
    }
}

/// Source rows are domain 1, target rows domain 0.
pub(crate) fn domain_loss(g: &mut Graph, source_probs: Var, target_probs: Var) -> Result<Var> {
    let ns = g.value(source_probs).shape()[0];
    let nt = g.value(target_probs).shape()[0];
    let ls = g.cross_entropy(source_probs, &vec![1; ns])?;
    let lt = g.cross_entropy(target_probs, &vec![0; nt])?;
    g.weighted_sum(&[(ls, 1.0), (lt, 1.0)])
}

/// Mean cross-entropy of every task head over a labeled batch.
pub fn task_losses(model: &HierModel, store: &ParamStore, batch: &LabeledSet) -> Result<Vec<f64>> {
    if batch.n_tasks() != model.n_tasks() {
        return Err(Error::Shape(format!("batch has {} label sets for {} tasks", batch.n_tasks(), model.n_tasks())));
    }
    let idx: Vec<usize> = (0..batch.len()).collect();
    let probs = all_probs(model, store, &batch.batch(&idx))?;
    probs
        .iter()
        .enumerate()
        .map(|(m, p)| {
            let c = p.shape()[1];
            match batch.labels(m).iter().find(|&&y| y >= c) {
                Some(&label) => Err(Error::LabelOutOfRange { label, classes: c }),
                None => Ok(kernels::cross_entropy(p.data(), batch.labels(m), c)),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainLosses {
    /// Task-shared classifier loss seen by each task.
    pub shared: Vec<f64>,
    /// Task-specific classifier loss, for hard tasks under the hierarchy.
    pub specific: Vec<Option<f64>>,
}

/// Domain-classifier losses on one source and one target batch of images.
pub fn domain_losses(model: &HierModel, store: &ParamStore, source: &Tensor, target: &Tensor) -> Result<DomainLosses> {
    let mut g = Graph::new(store);
    let (xs, xt) = (g.input(source.clone()), g.input(target.clone()));
    let mut out = DomainLosses { shared: Vec::new(), specific: Vec::new() };
    for m in 0..model.n_tasks() {
        let e = model.extractor_of(m);
        let zs = model.shared_features(&mut g, e, xs)?;
        let zt = model.shared_features(&mut g, e, xt)?;
        let ps = model.shared_domain_probs(&mut g, e, zs, 1.0)?;
        let pt = model.shared_domain_probs(&mut g, e, zt, 1.0)?;
        let l = domain_loss(&mut g, ps, pt)?;
        out.shared.push(g.value(l).item());
        out.specific.push(if model.has_specific(m) {
            let hs = model.head_features(&mut g, m, zs)?;
            let ht = model.head_features(&mut g, m, zt)?;
            let ps = model.task_domain_probs(&mut g, m, hs, 1.0)?;
            let pt = model.task_domain_probs(&mut g, m, ht, 1.0)?;
            let l = domain_loss(&mut g, ps, pt)?;
            Some(g.value(l).item())
        } else {
            None
        });
    }
    Ok(out)
}

/// One task's share of a training step.
pub(crate) struct TaskBatch {
    pub source: Tensor,
    pub labels: Vec<usize>,
    /// Absent without adaptation.
    pub target: Option<Tensor>,
    /// One-hot predictions of earlier tasks on the source rows (sequential mode).
    pub source_condition: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct StepLosses {
    pub objective: f64,
    pub task: Vec<Option<f64>>,
    pub shared_domain: Vec<Option<f64>>,
    pub task_domain: Vec<Option<f64>>,
    pub weights: Vec<Option<f64>>,
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&shape, data)
}

/// Builds the combined objective over the `active` tasks and returns its
/// gradients. The adversarial terms reach the extractors through gradient
/// reversal, so one descent step on the result moves predictors and
/// extractors down the task losses and up the weighted domain losses, while
/// the domain classifiers move down their own losses.
pub(crate) fn objective_gradients(
    model: &HierModel,
    store: &ParamStore,
    cfg: &TrainConfig,
    active: &[usize],
    batches: &[TaskBatch],
) -> Result<(StepLosses, Gradients)> {
    let m_all = model.n_tasks();
    let adapt = cfg.adapts();
    let mut g = Graph::new(store);
    let mut z_source = vec![None; m_all];
    let mut z_target = vec![None; m_all];
    for e in 0..model.n_extractors() {
        let members: Vec<usize> = active.iter().copied().filter(|&m| model.extractor_of(m) == e).collect();
        if members.is_empty() {
            continue;
        }
        let mut parts = Vec::new();
        for &m in &members {
            parts.push(&batches[m].source);
            if adapt {
                let t = batches[m].target.as_ref().ok_or_else(|| Error::MissingData("target batch".into()))?;
                parts.push(t);
            }
        }
        let x = g.input(stack(&parts)?);
        let z = model.shared_features(&mut g, e, x)?;
        let mut offset = 0;
        for &m in &members {
            let ns = batches[m].source.shape()[0];
            z_source[m] = Some(g.rows(z, offset, ns)?);
            offset += ns;
            if adapt {
                let nt = batches[m].target.as_ref().map_or(0, |t| t.shape()[0]);
                z_target[m] = Some(g.rows(z, offset, nt)?);
                offset += nt;
            }
        }
    }

    let count = |d: Difficulty| active.iter().filter(|&&m| model.tasks()[m].difficulty == d).count() as f64;
    let (n_easy, n_hard) = (count(Difficulty::Easy), count(Difficulty::Hard));
    let mut losses = StepLosses {
        task: vec![None; m_all],
        shared_domain: vec![None; m_all],
        task_domain: vec![None; m_all],
        weights: vec![None; m_all],
        ..Default::default()
    };
    let mut terms = Vec::new();
    let mut shared_nodes = vec![None; m_all];
    for &m in active {
        let zs = z_source[m].expect("every active task was forwarded");
        let hs = model.head_features(&mut g, m, zs)?;
        let cond = batches[m].source_condition.clone().map(|c| g.input(c));
        let p = model.predictor_probs(&mut g, m, hs, cond)?;
        let l = g.cross_entropy(p, &batches[m].labels)?;
        losses.task[m] = Some(g.value(l).item());
        let per = match model.tasks()[m].difficulty {
            Difficulty::Easy => n_easy,
            Difficulty::Hard => n_hard,
        };
        terms.push((l, cfg.task_lambda(m) / per));
        if !adapt {
            continue;
        }
        let zt = z_target[m].expect("forwarded with the source rows");
        let e = model.extractor_of(m);
        let ps = model.shared_domain_probs(&mut g, e, zs, 1.0)?;
        let pt = model.shared_domain_probs(&mut g, e, zt, 1.0)?;
        let ld0 = domain_loss(&mut g, ps, pt)?;
        losses.shared_domain[m] = Some(g.value(ld0).item());
        shared_nodes[m] = Some(ld0);
        if model.has_specific(m) {
            let ht = model.head_features(&mut g, m, zt)?;
            let ps = model.task_domain_probs(&mut g, m, hs, 1.0)?;
            let pt = model.task_domain_probs(&mut g, m, ht, 1.0)?;
            let ld = domain_loss(&mut g, ps, pt)?;
            losses.task_domain[m] = Some(g.value(ld).item());
            terms.push((ld, cfg.lambda_dm));
        }
    }
    if adapt {
        for e in 0..model.n_extractors() {
            let members: Vec<usize> = active.iter().copied().filter(|&m| model.extractor_of(m) == e).collect();
            let values: Vec<f64> = members.iter().map(|&m| losses.shared_domain[m].unwrap()).collect();
            for (&m, w) in members.iter().zip(objective_weights(cfg.objective, &values)) {
                losses.weights[m] = Some(w);
                terms.push((shared_nodes[m].unwrap(), cfg.lambda_d0 * w));
            }
        }
    }
    let j = g.weighted_sum(&terms)?;
    losses.objective = g.value(j).item();
    let grads = g.backward(j)?;
    Ok((losses, grads))
}
