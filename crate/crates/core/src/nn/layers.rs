//! Parameterised layers. Each layer only stores [`ParamId`]s; weights live
//! in a [`ParamStore`] and are read onto the tape at forward time.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Init, ParamGroup, ParamId, ParamStore};
use super::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self::with_init(store, rng, name, group, cin, cout, kernel, stride, Init::FanIn { gain: 1.0 })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, init.sample(&[cout, cin, kernel, kernel], rng));
        let bias = store.add(format!("{name}.bias"), group, Init::Zeros.sample(&[cout], rng));
        Self {
            weight,
            bias: Some(bias),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        x.conv2d(w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        Self::with_init(store, rng, name, group, fan_in, fan_out, bias, Init::FanIn { gain: 1.0 })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, init.sample(&[fan_out, fan_in], rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Init::Zeros.sample(&[fan_out], rng)));
        Self { weight, bias }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        x.linear(w, b)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        channels: usize,
        groups: usize,
    ) -> Self {
        let groups = groups.min(channels);
        assert_eq!(channels % groups, 0, "{name}: {channels} channels, {groups} groups");
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Init::Ones.sample(&[channels], rng)),
            beta: store.add(format!("{name}.beta"), group, Init::Zeros.sample(&[channels], rng)),
            groups,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.group_norm(self.groups, g.param(store, self.gamma), g.param(store, self.beta), 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, group: ParamGroup, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Init::Ones.sample(&[width], rng)),
            beta: store.add(format!("{name}.beta"), group, Init::Zeros.sample(&[width], rng)),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.layer_norm(g.param(store, self.gamma), g.param(store, self.beta), 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        rows: usize,
        width: usize,
    ) -> Self {
        Self {
            table: store.add(format!("{name}.table"), group, Init::Normal { std: 0.5 }.sample(&[rows, width], rng)),
            rows,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Var<'g, T> {
        g.param(store, self.table).select0(ids)
    }
}
