use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Which component a parameter belongs to; decides the update rule it receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Task-shared feature extractor; the index separates the per-task
    /// extractors of the independent and sequential baselines.
    SharedExtractor(usize),
    /// Task-specific extractor of the given hard task.
    TaskExtractor(usize),
    /// Predictor head of the given task.
    Predictor(usize),
    /// Domain classifier behind the given task-shared extractor.
    SharedDomain(usize),
    /// Domain classifier behind the given task-specific extractor.
    TaskDomain(usize),
}

impl ParamGroup {
    fn encode(self) -> (u8, u32) {
        match self {
            ParamGroup::SharedExtractor(e) => (0, e as u32),
            ParamGroup::TaskExtractor(m) => (1, m as u32),
            ParamGroup::Predictor(m) => (2, m as u32),
            ParamGroup::SharedDomain(e) => (3, e as u32),
            ParamGroup::TaskDomain(m) => (4, m as u32),
        }
    }

    fn decode(tag: u8, index: u32) -> Result<Self> {
        let m = index as usize;
        Ok(match tag {
            0 => ParamGroup::SharedExtractor(m),
            1 => ParamGroup::TaskExtractor(m),
            2 => ParamGroup::Predictor(m),
            3 => ParamGroup::SharedDomain(m),
            4 => ParamGroup::TaskDomain(m),
            t => return Err(Error::format("checkpoint", format!("unknown group tag {t}"))),
        })
    }

    pub fn is_domain_classifier(self) -> bool {
        matches!(self, ParamGroup::SharedDomain(_) | ParamGroup::TaskDomain(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Named trainable tensors, each owned by exactly one [`ParamGroup`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    const MAGIC: &'static [u8; 8] = b"VBIPARAM";
    const VERSION: u32 = 1;

    /// Named-tensor archive: magic, version, count, then per tensor
    /// `(name, group, shape, f64 little-endian values)`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            let (tag, idx) = p.group.encode();
            w.write_all(&[tag])?;
            w.write_all(&idx.to_le_bytes())?;
            let shape = p.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(p.value.len() * 8);
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::format("checkpoint", e.to_string()))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let group = ParamGroup::decode(tag[0], read_u32(&mut r)?)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.add(name, group, Tensor::new(&shape, data)?)?;
        }
        Ok(store)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Gradient buffers aligned with a [`ParamStore`]; absent entries are zero.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn for_store(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn accumulate_owned(&mut self, id: ParamId, g: Vec<f64>) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Drop every gradient whose parameter does not satisfy `keep`.
    pub fn retain(&mut self, store: &ParamStore, keep: impl Fn(ParamGroup) -> bool) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if i < store.len() && !keep(store.group(ParamId(i))) {
                *g = None;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Plain gradient descent, `θ ← θ − μ·g`, no momentum and no weight decay.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, mu: f64) -> Result<()> {
    if !(mu > 0.0) {
        return Err(Error::InvalidConfig(format!("learning rate must be positive, got {mu}")));
    }
    for id in (0..store.len()).map(ParamId) {
        if let Some(g) = grads.get(id) {
            let t = store.get_mut(id);
            if g.len() != t.len() {
                return Err(Error::Shape(format!("gradient for {} has wrong size", id.0)));
            }
            t.data_mut().iter_mut().zip(g).for_each(|(p, g)| *p -= mu * g);
        }
    }
    Ok(())
}
