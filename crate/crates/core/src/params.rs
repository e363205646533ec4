//! Named parameter and buffer storage shared by every model component.
//!
//! Components hold [`ParamId`]s; values live in one [`ParamStore`]. A
//! forward pass binds the store to a tape ([`ParamStore::bind`]), which is
//! also the point where a virtual weight step can substitute its own
//! values for a subset of parameters.

use std::ops::Index;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Tape, Tensor, Var};

/// Which phase owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Stem,
    PlainBlock,
    Block,
    Alpha,
    Controller,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Stem,
        ParamGroup::PlainBlock,
        ParamGroup::Block,
        ParamGroup::Alpha,
        ParamGroup::Controller,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    group: ParamGroup,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(Entry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn values(&self, ids: &[ParamId]) -> Vec<Tensor> {
        ids.iter().map(|&id| self.get(id).clone()).collect()
    }

    pub fn set_all(&mut self, ids: &[ParamId], values: Vec<Tensor>) -> Result<()> {
        for (&id, v) in ids.iter().zip(values) {
            self.set(id, v)?;
        }
        Ok(())
    }

    /// Digest of every value in a group, for freeze checks.
    pub fn checksum(&self, group: ParamGroup) -> [u8; 32] {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            h.update(e.name.as_bytes());
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Bind every parameter to `tape`: leaves for the `trainable` groups,
    /// constants for the rest.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: &[ParamGroup]) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable.contains(&e.group) {
                    tape.leaf(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters bound to one tape, indexable by [`ParamId`].
#[derive(Clone)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self, ids: &[ParamId]) -> Vec<Var<'t>> {
        ids.iter().map(|&id| self.vars[id.0]).collect()
    }

    /// Replace the bindings of `ids` (e.g. with a virtual weight step).
    pub fn substitute(&mut self, ids: &[ParamId], vars: &[Var<'t>]) {
        for (&id, &v) in ids.iter().zip(vars) {
            self.vars[id.0] = v;
        }
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

/// Running per-channel moments of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningMoments {
    pub name: String,
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningMoments {
    /// Exponential moving average with unbiased batch variance.
    pub fn update(&mut self, stats: &BatchStats, momentum: f32) {
        let correction = if stats.count > 1 {
            stats.count as f32 / (stats.count - 1) as f32
        } else {
            1.0
        };
        for (r, &b) in self.mean.data_mut().iter_mut().zip(stats.mean.data()) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(stats.var.data()) {
            *r = (1.0 - momentum) * *r + momentum * b * correction;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug, Default)]
pub struct Buffers {
    moments: Vec<RunningMoments>,
}

impl Buffers {
    pub fn add(&mut self, name: impl Into<String>, channels: usize) -> BufferId {
        self.moments.push(RunningMoments {
            name: name.into(),
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        });
        BufferId(self.moments.len() - 1)
    }

    pub fn get(&self, id: BufferId) -> &RunningMoments {
        &self.moments[id.0]
    }

    pub fn get_mut(&mut self, id: BufferId) -> &mut RunningMoments {
        &mut self.moments[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &RunningMoments> {
        self.moments.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut RunningMoments> {
        self.moments.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.moments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moments.is_empty()
    }

    pub fn checksum(&self, prefix: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for m in self.moments.iter().filter(|m| m.name.starts_with(prefix)) {
            h.update(m.name.as_bytes());
            for v in m.mean.data().iter().chain(m.var.data()) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn apply(&mut self, updates: Vec<(BufferId, BatchStats)>) {
        for (id, stats) in updates {
            self.moments[id.0].update(&stats, BN_MOMENTUM);
        }
    }
}
