//! In-memory datasets handed to training and validation.
//!
//! Target-domain data travels as [`UnlabeledSet`], which stores no labels, so
//! code that only receives target data cannot read target labels:
//!
//! ```compile_fail
//! use vbi_transfer::data::UnlabeledSet;
//! fn peek(t: &UnlabeledSet) -> usize {
//!     t.labels(0)[0]
//! }
//! ```

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::preprocess::InputTensor;

/// Index of the location task (detection folded into class 0).
pub const LOCATION: usize = 0;
/// Index of the severity task.
pub const SEVERITY: usize = 1;

type Sample = Arc<[f32]>;

fn check_shape(inputs: &[Sample], shape: [usize; 3]) -> Result<()> {
    let len: usize = shape.iter().product();
    match inputs.iter().find(|x| x.len() != len) {
        Some(x) => Err(Error::Shape(format!("sample of {} values, expected {shape:?}", x.len()))),
        None => Ok(()),
    }
}

fn batch_of(inputs: &[Sample], shape: [usize; 3], idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * shape.iter().product::<usize>());
    for &i in idx {
        data.extend(inputs[i].iter().map(|&v| v as f64));
    }
    Tensor::new(&[idx.len(), shape[0], shape[1], shape[2]], data).expect("checked on construction")
}

/// Inputs with one label vector per task.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    inputs: Vec<Sample>,
    labels: Vec<Vec<usize>>,
    shape: [usize; 3],
}

impl LabeledSet {
    pub fn new(inputs: Vec<Vec<f32>>, labels: Vec<Vec<usize>>, shape: [usize; 3]) -> Result<Self> {
        let inputs: Vec<Sample> = inputs.into_iter().map(Arc::from).collect();
        check_shape(&inputs, shape)?;
        if labels.iter().any(|l| l.len() != inputs.len()) {
            return Err(Error::Shape("label vectors must match the sample count".into()));
        }
        Ok(Self { inputs, labels, shape })
    }

    /// Location and severity labels from network input tensors.
    pub fn from_tensors(tensors: &[InputTensor]) -> Self {
        let inputs = tensors.iter().map(|t| Arc::from(t.data.as_slice())).collect();
        let labels = vec![
            tensors.iter().map(|t| t.location_class as usize).collect(),
            tensors.iter().map(|t| t.severity_class as usize).collect(),
        ];
        Self { inputs, labels, shape: [crate::preprocess::CHANNELS, crate::preprocess::WIDTH, crate::preprocess::HEIGHT] }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn n_tasks(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self, task: usize) -> &[usize] {
        &self.labels[task]
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor {
        batch_of(&self.inputs, self.shape, idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: self.labels.iter().map(|l| idx.iter().map(|&i| l[i]).collect()).collect(),
            shape: self.shape,
        }
    }

    /// Keeps only the listed tasks, in the given order.
    pub fn select_tasks(&self, tasks: &[usize]) -> Self {
        Self { inputs: self.inputs.clone(), labels: tasks.iter().map(|&t| self.labels[t].clone()).collect(), shape: self.shape }
    }

    /// Same samples with the labels dropped.
    pub fn without_labels(&self) -> UnlabeledSet {
        UnlabeledSet { inputs: self.inputs.clone(), shape: self.shape }
    }
}

/// Inputs only.
#[derive(Clone, Debug)]
pub struct UnlabeledSet {
    inputs: Vec<Sample>,
    shape: [usize; 3],
}

impl UnlabeledSet {
    pub fn new(inputs: Vec<Vec<f32>>, shape: [usize; 3]) -> Result<Self> {
        let inputs: Vec<Sample> = inputs.into_iter().map(Arc::from).collect();
        check_shape(&inputs, shape)?;
        Ok(Self { inputs, shape })
    }

    pub fn from_tensors(tensors: &[InputTensor]) -> Self {
        LabeledSet::from_tensors(tensors).without_labels()
    }

    pub fn empty(shape: [usize; 3]) -> Self {
        Self { inputs: Vec::new(), shape }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor {
        batch_of(&self.inputs, self.shape, idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(), shape: self.shape }
    }

    /// Attaches externally produced labels, e.g. pseudo-labels.
    pub fn with_labels(&self, labels: Vec<Vec<usize>>) -> Result<LabeledSet> {
        if labels.iter().any(|l| l.len() != self.inputs.len()) {
            return Err(Error::Shape("label vectors must match the sample count".into()));
        }
        Ok(LabeledSet { inputs: self.inputs.clone(), labels, shape: self.shape })
    }
}

/// Tensorized trials of one bridge (and optionally one vehicle).
#[derive(Clone, Debug)]
pub struct DomainData {
    pub set: LabeledSet,
    /// Trial each sample came from; augmented copies share their trial's id.
    pub trial_ids: Vec<u64>,
}

impl DomainData {
    /// Loads every trial of `bridge_id` (and `vehicle_id` when given), each as
    /// its original plus `n_copies` augmented copies.
    pub fn load(
        manifest: &crate::sim::Manifest,
        dir: &std::path::Path,
        bridge_id: &str,
        vehicle_id: Option<&str>,
        n_copies: usize,
        seed: u64,
        stft: &crate::preprocess::StftConfig,
    ) -> Result<Self> {
        let entries: Vec<_> = manifest
            .entries
            .iter()
            .filter(|e| e.bridge_id == bridge_id && vehicle_id.is_none_or(|v| e.vehicle_id == v))
            .collect();
        if entries.is_empty() {
            return Err(Error::MissingData(format!("no trials for bridge {bridge_id} in {}", dir.display())));
        }
        let tensors = crate::preprocess::tensorize_entries(manifest, dir, &entries, n_copies, seed, stft)?;
        let trial_ids = entries.iter().flat_map(|e| std::iter::repeat_n(e.trial_id, n_copies + 1)).collect();
        Ok(Self { set: LabeledSet::from_tensors(&tensors), trial_ids })
    }

    /// Sample indices whose trial satisfies `keep`.
    pub fn where_trial(&self, keep: impl Fn(u64) -> bool) -> Vec<usize> {
        (0..self.trial_ids.len()).filter(|&i| keep(self.trial_ids[i])).collect()
    }
}
