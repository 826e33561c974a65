use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Difficulty, Mode, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::{glorot_uniform, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var, LEAKY_SLOPE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub filters: usize,
    pub kernel: usize,
}

/// Shape of the task-shared CNN and the predictor heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Input `[channels, height, width]`.
    pub input: [usize; 3],
    /// Each block is conv, max-pool, leaky ReLU.
    pub convs: Vec<ConvLayer>,
    pub pool: usize,
    /// Hidden width of every predictor.
    pub hidden: usize,
}

impl ArchConfig {
    pub fn standard() -> Self {
        Self {
            input: [4, 64, 64],
            convs: vec![
                ConvLayer { filters: 64, kernel: 5 },
                ConvLayer { filters: 50, kernel: 5 },
                ConvLayer { filters: 50, kernel: 3 },
            ],
            pool: 2,
            hidden: 100,
        }
    }

    /// Same block structure with 8 filters per layer and a 32-unit predictor
    /// hidden layer; flatten is 200.
    pub fn compact() -> Self {
        Self {
            convs: vec![
                ConvLayer { filters: 8, kernel: 5 },
                ConvLayer { filters: 8, kernel: 5 },
                ConvLayer { filters: 8, kernel: 3 },
            ],
            hidden: 32,
            ..Self::standard()
        }
    }

    pub fn flatten_size(&self) -> Result<usize> {
        if self.input.contains(&0) || self.pool == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig(format!("degenerate architecture {self:?}")));
        }
        let [mut c, mut h, mut w] = self.input;
        for (i, l) in self.convs.iter().enumerate() {
            if l.filters == 0 || l.kernel == 0 || l.kernel > h || l.kernel > w {
                return Err(Error::InvalidConfig(format!("conv {i} ({l:?}) does not fit a {h}x{w} input")));
            }
            (h, w) = (h - l.kernel + 1, w - l.kernel + 1);
            if h < self.pool || w < self.pool {
                return Err(Error::InvalidConfig(format!("pool after conv {i} does not fit {h}x{w}")));
            }
            (c, h, w) = (l.filters, h / self.pool, w / self.pool);
        }
        Ok(c * h * w)
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub tasks: Vec<TaskSpec>,
    pub arch: ArchConfig,
    pub mode: Mode,
    pub hierarchy: bool,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

struct Slot {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    fans: Option<(usize, usize)>,
}

/// Parameter handles of a built model. The values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct HierModel {
    spec: ModelSpec,
    flat: usize,
    convs: Vec<Vec<Layer>>,
    specific: Vec<Option<Layer>>,
    hidden: Vec<Layer>,
    out: Vec<Layer>,
    shared_domain: Vec<Layer>,
    task_domain: Vec<Option<Layer>>,
}

fn weight_and_bias(slots: &mut Vec<Slot>, name: &str, group: ParamGroup, w: Vec<usize>, fans: (usize, usize)) {
    let b = if w.len() == 2 { vec![w[1]] } else { vec![w[0]] };
    slots.push(Slot { name: format!("{name}.w"), group, shape: w, fans: Some(fans) });
    slots.push(Slot { name: format!("{name}.b"), group, shape: b, fans: None });
}

fn layout(spec: &ModelSpec) -> Result<(usize, Vec<Slot>)> {
    let flat = spec.arch.flatten_size()?;
    let tasks = &spec.tasks;
    let n_ext = n_extractors(spec);
    let mut slots = Vec::new();
    for e in 0..n_ext {
        let mut cin = spec.arch.input[0];
        for (i, l) in spec.arch.convs.iter().enumerate() {
            let k2 = l.kernel * l.kernel;
            let shape = vec![l.filters, cin, l.kernel, l.kernel];
            weight_and_bias(&mut slots, &format!("shared{e}.conv{i}"), ParamGroup::SharedExtractor(e), shape, (cin * k2, l.filters * k2));
            cin = l.filters;
        }
    }
    for (m, t) in tasks.iter().enumerate() {
        if spec.hierarchy && t.difficulty == Difficulty::Hard {
            weight_and_bias(&mut slots, &format!("specific{m}"), ParamGroup::TaskExtractor(m), vec![flat, flat], (flat, flat));
        }
    }
    for (m, t) in tasks.iter().enumerate() {
        let input = flat + condition_width(spec, m);
        let h = spec.arch.hidden;
        weight_and_bias(&mut slots, &format!("predictor{m}.hidden"), ParamGroup::Predictor(m), vec![input, h], (input, h));
        weight_and_bias(&mut slots, &format!("predictor{m}.out"), ParamGroup::Predictor(m), vec![h, t.n_classes], (h, t.n_classes));
    }
    for e in 0..n_ext {
        weight_and_bias(&mut slots, &format!("domain_shared{e}"), ParamGroup::SharedDomain(e), vec![flat, 2], (flat, 2));
    }
    for (m, t) in tasks.iter().enumerate() {
        if spec.hierarchy && t.difficulty == Difficulty::Hard {
            weight_and_bias(&mut slots, &format!("domain_task{m}"), ParamGroup::TaskDomain(m), vec![flat, 2], (flat, 2));
        }
    }
    Ok((flat, slots))
}

fn n_extractors(spec: &ModelSpec) -> usize {
    match spec.mode {
        Mode::MultiTask => 1,
        Mode::Independent | Mode::Sequential => spec.tasks.len(),
    }
}

/// Width of the one-hot predictions of earlier tasks fed to task `m`.
fn condition_width(spec: &ModelSpec, m: usize) -> usize {
    match spec.mode {
        Mode::Sequential => spec.tasks[..m].iter().map(|t| t.n_classes).sum(),
        _ => 0,
    }
}

/// Builds the layout and draws Glorot-uniform weights and zero biases from `seed`.
pub fn build_model(spec: ModelSpec, seed: u64) -> Result<(HierModel, ParamStore)> {
    if spec.tasks.is_empty() {
        return Err(Error::InvalidConfig("at least one task is required".into()));
    }
    let (_, slots) = layout(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for s in slots {
        let value = match s.fans {
            Some((fi, fo)) => glorot_uniform(&mut rng, &s.shape, fi, fo),
            None => Tensor::zeros(&s.shape),
        };
        store.add(s.name, s.group, value)?;
    }
    let model = HierModel::bind(spec, &store)?;
    Ok((model, store))
}

/// Writes `model.json` and `params.bin` into `dir`.
pub fn save_model(dir: &Path, model: &HierModel, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    serde_json::to_writer_pretty(BufWriter::new(fs::File::create(dir.join("model.json"))?), model.spec())?;
    let mut w = BufWriter::new(fs::File::create(dir.join("params.bin"))?);
    store.write_checkpoint(&mut w)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(HierModel, ParamStore)> {
    let spec: ModelSpec = serde_json::from_reader(BufReader::new(fs::File::open(dir.join("model.json"))?))?;
    let store = ParamStore::read_checkpoint(BufReader::new(fs::File::open(dir.join("params.bin"))?))?;
    let model = HierModel::bind(spec, &store)?;
    Ok((model, store))
}

impl HierModel {
    /// Resolves parameter handles in `store`, checking names, groups and shapes.
    pub fn bind(spec: ModelSpec, store: &ParamStore) -> Result<HierModel> {
        let (flat, slots) = layout(&spec)?;
        if slots.len() != store.len() {
            return Err(Error::Shape(format!("store has {} parameters, layout needs {}", store.len(), slots.len())));
        }
        for s in &slots {
            let id = store.id(&s.name).ok_or_else(|| Error::Shape(format!("missing parameter {}", s.name)))?;
            if store.get(id).shape() != s.shape.as_slice() || store.group(id) != s.group {
                return Err(Error::Shape(format!(
                    "parameter {} is {:?} in {:?}, layout needs {:?} in {:?}",
                    s.name,
                    store.get(id).shape(),
                    store.group(id),
                    s.shape,
                    s.group
                )));
            }
        }
        let layer = |name: String| Layer { w: store.id(&format!("{name}.w")).unwrap(), b: store.id(&format!("{name}.b")).unwrap() };
        let hard = |m: usize| spec.hierarchy && spec.tasks[m].difficulty == Difficulty::Hard;
        let m_all = 0..spec.tasks.len();
        let n_ext = n_extractors(&spec);
        Ok(HierModel {
            flat,
            convs: (0..n_ext).map(|e| (0..spec.arch.convs.len()).map(|i| layer(format!("shared{e}.conv{i}"))).collect()).collect(),
            specific: m_all.clone().map(|m| hard(m).then(|| layer(format!("specific{m}")))).collect(),
            hidden: m_all.clone().map(|m| layer(format!("predictor{m}.hidden"))).collect(),
            out: m_all.clone().map(|m| layer(format!("predictor{m}.out"))).collect(),
            shared_domain: (0..n_ext).map(|e| layer(format!("domain_shared{e}"))).collect(),
            task_domain: m_all.map(|m| hard(m).then(|| layer(format!("domain_task{m}")))).collect(),
            spec,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.spec.tasks
    }

    pub fn n_tasks(&self) -> usize {
        self.spec.tasks.len()
    }

    pub fn flatten_size(&self) -> usize {
        self.flat
    }

    pub fn n_extractors(&self) -> usize {
        self.convs.len()
    }

    /// Index of the task-shared extractor task `m` reads from.
    pub fn extractor_of(&self, m: usize) -> usize {
        if self.convs.len() == 1 {
            0
        } else {
            m
        }
    }

    /// Tasks reading from extractor `e`.
    pub fn tasks_of(&self, e: usize) -> Vec<usize> {
        (0..self.n_tasks()).filter(|&m| self.extractor_of(m) == e).collect()
    }

    /// Whether task `m` has a task-specific extractor and domain classifier.
    pub fn has_specific(&self, m: usize) -> bool {
        self.specific[m].is_some()
    }

    pub fn condition_width(&self, m: usize) -> usize {
        condition_width(&self.spec, m)
    }

    fn apply(g: &mut Graph, l: Layer, x: Var) -> Result<Var> {
        let (w, b) = (g.param(l.w), g.param(l.b));
        g.dense(x, w, b)
    }

    /// Task-shared features `[N, flat]` of extractor `e` for images `x: [N, C, H, W]`.
    pub fn shared_features(&self, g: &mut Graph, e: usize, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.convs[e] {
            let (w, b) = (g.param(l.w), g.param(l.b));
            h = g.conv2d(h, w, b, 1)?;
            h = g.maxpool2d(h, self.spec.arch.pool, self.spec.arch.pool)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        g.flatten(h)
    }

    /// Input to task `m`'s predictor: shared features, or the task-specific
    /// features for a hard task when the hierarchy is enabled.
    pub fn head_features(&self, g: &mut Graph, m: usize, z: Var) -> Result<Var> {
        match self.specific[m] {
            Some(l) => {
                let h = Self::apply(g, l, z)?;
                Ok(g.relu(h))
            }
            None => Ok(z),
        }
    }

    /// Class probabilities of task `m`; `condition` carries earlier tasks'
    /// one-hot predictions in sequential mode.
    pub fn predictor_probs(&self, g: &mut Graph, m: usize, h: Var, condition: Option<Var>) -> Result<Var> {
        let x = match (condition, self.condition_width(m)) {
            (_, 0) => h,
            (Some(c), _) => g.concat(h, c)?,
            (None, w) => return Err(Error::Shape(format!("task {m} needs a {w}-wide condition input"))),
        };
        let hid = Self::apply(g, self.hidden[m], x)?;
        let hid = g.relu(hid);
        let logits = Self::apply(g, self.out[m], hid)?;
        g.softmax(logits)
    }

    /// Domain probabilities (column 1 is "source") of extractor `e`'s
    /// classifier, behind a gradient reversal of strength `grl`.
    pub fn shared_domain_probs(&self, g: &mut Graph, e: usize, z: Var, grl: f64) -> Result<Var> {
        let r = g.grl(z, grl);
        let logits = Self::apply(g, self.shared_domain[e], r)?;
        g.softmax(logits)
    }

    pub fn task_domain_probs(&self, g: &mut Graph, m: usize, h: Var, grl: f64) -> Result<Var> {
        let l = self.task_domain[m].ok_or_else(|| Error::InvalidConfig(format!("task {m} has no task-specific domain classifier")))?;
        let r = g.grl(h, grl);
        let logits = Self::apply(g, l, r)?;
        g.softmax(logits)
    }
}
