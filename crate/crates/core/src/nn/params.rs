//! Named parameter storage shared by every trainable network in the crate.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Which part of the model a parameter belongs to. Training modes select the
/// groups that receive gradients; everything else is a constant on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Frame-wise denoiser (the image model).
    Unet,
    /// Temporal attention layers.
    Temporal,
    /// Condition adapter branch.
    Adapter,
    /// Evaluation networks (identity embedder, attribute classifiers).
    Judge,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Unet => "unet",
            ParamGroup::Temporal => "temporal",
            ParamGroup::Adapter => "adapter",
            ParamGroup::Judge => "judge",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unet" => Some(ParamGroup::Unet),
            "temporal" => Some(ParamGroup::Temporal),
            "adapter" => Some(ParamGroup::Adapter),
            "judge" => Some(ParamGroup::Judge),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Arc<Tensor<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            group,
            value: Arc::new(value),
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Arc<Tensor<T>> {
        &self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Mutable access for optimizers; clones the tensor if a graph still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &self.entries[id.0];
        if cur.value.shape() != value.shape() {
            return Err(Error::Format(format!(
                "parameter {} expects shape {:?}, got {:?}",
                cur.name,
                cur.value.shape(),
                value.shape()
            )));
        }
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn num_elements(&self, group: Option<ParamGroup>) -> usize {
        self.entries
            .iter()
            .filter(|e| group.is_none_or(|g| e.group == g))
            .map(|e| e.value.numel())
            .sum()
    }

    /// SHA-256 over the names and little-endian bytes of every parameter in
    /// `group` (all groups when `None`), in name order.
    pub fn checksum(&self, group: Option<ParamGroup>) -> String {
        let mut hasher = Sha256::new();
        for (name, &i) in &self.index {
            let e = &self.entries[i];
            if group.is_some_and(|g| g != e.group) {
                continue;
            }
            hasher.update(name.as_bytes());
            for v in e.value.data() {
                hasher.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Replace every parameter in `group` with a fresh draw from `init`.
    pub fn reinit_group(&mut self, group: ParamGroup, rng: &mut impl Rng, init: Init) {
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            let shape = e.value.shape().to_vec();
            e.value = Arc::new(init.sample(&shape, rng));
        }
    }
}

/// Weight initializers.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±gain / sqrt(fan_in)`, fan-in taken from all but the leading axis.
    FanIn { gain: f64 },
    Uniform { bound: f64 },
    Normal { std: f64 },
}

impl Init {
    pub fn sample<T: Scalar>(self, shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = match self {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::FanIn { gain } => {
                let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                let bound = gain / (fan_in as f64).sqrt();
                uniform(n, bound, rng)
            }
            Init::Uniform { bound } => uniform(n, bound, rng),
            Init::Normal { std } => {
                let d = rand_distr::Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| T::from_f64_lossy(d.sample(rng))).collect()
            }
        };
        Tensor::from_vec(shape, data)
    }
}

fn uniform<T: Scalar>(n: usize, bound: f64, rng: &mut impl Rng) -> Vec<T> {
    if bound == 0.0 {
        return vec![T::zero(); n];
    }
    let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..n).map(|_| T::from_f64_lossy(d.sample(rng))).collect()
}
