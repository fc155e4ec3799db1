use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::kernels::add_into_prefix;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StatsId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is for; weight decay only touches [`ParamKind::Weight`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Vec<f32>,
    /// Set when a backward pass accumulates into this parameter since the last `zero_grad`.
    pub touched: bool,
}

/// Batch-norm running statistics sized to a channel capacity; users slice the first C.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub name: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    /// Batches folded in since the last reset (recalibration averaging).
    pub count: usize,
}

impl BnStats {
    pub fn new(name: impl Into<String>, capacity: usize) -> Self {
        BnStats {
            name: name.into(),
            mean: vec![0.0; capacity],
            var: vec![1.0; capacity],
            count: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.mean.len()
    }

    pub fn reset(&mut self) {
        self.mean.fill(0.0);
        self.var.fill(1.0);
        self.count = 0;
    }
}

/// Owns every trainable parameter and batch-norm buffer of one network, by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<BnStats>,
    names: BTreeMap<String, ParamId>,
    stat_names: BTreeMap<String, StatsId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.names.insert(name.clone(), id);
        let grad = vec![0.0; value.numel()];
        self.params.push(Param {
            name,
            kind,
            value,
            grad,
            touched: false,
        });
        Ok(id)
    }

    /// He-normal (fan-in) initialized weight.
    pub fn add_he_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        rng: &mut R,
    ) -> Result<ParamId> {
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = normal.sample(rng) as f32;
        }
        self.add(name, ParamKind::Weight, t)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, capacity: usize) -> Result<StatsId> {
        let name = name.into();
        if self.stat_names.contains_key(&name) {
            return Err(Error::Config(format!("duplicate statistics name {name}")));
        }
        let id = StatsId(self.stats.len());
        self.stat_names.insert(name.clone(), id);
        self.stats.push(BnStats::new(name, capacity));
        Ok(id)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn stats(&self, id: StatsId) -> &BnStats {
        &self.stats[id.0]
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut BnStats {
        &mut self.stats[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn all_stats(&self) -> &[BnStats] {
        &self.stats
    }

    pub fn all_stats_mut(&mut self) -> &mut [BnStats] {
        &mut self.stats
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn stats_id_of(&self, name: &str) -> Option<StatsId> {
        self.stat_names.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + use<> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
            p.touched = false;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, region: &[usize], grad: &[f32]) {
        let p = &mut self.params[id.0];
        add_into_prefix(&mut p.grad, p.value.shape(), grad, region);
        p.touched = true;
    }

    /// Adds `lambda * w` to the gradient over the leading `region` of a parameter.
    pub fn add_weight_decay(&mut self, id: ParamId, region: &[usize], lambda: f32) {
        let p = &mut self.params[id.0];
        let shape = p.value.shape().to_vec();
        let value = p.value.data();
        let grad = &mut p.grad;
        super::kernels::for_each_prefix_run(&shape, region, |off, _, len| {
            for (g, w) in grad[off..off + len].iter_mut().zip(&value[off..off + len]) {
                *g += lambda * w;
            }
        });
        p.touched = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_decay_only_touches_region() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", ParamKind::Weight, Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap())
            .unwrap();
        store.add_weight_decay(id, &[1, 2], 0.5);
        assert_eq!(store.param(id).grad, vec![0.5, 1.0, 0.0, 0.0]);
        assert!(store.param(id).touched);
        store.zero_grad();
        assert!(!store.param(id).touched);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", ParamKind::Bias, Tensor::zeros(&[1])).unwrap();
        assert!(store.add("a", ParamKind::Bias, Tensor::zeros(&[1])).is_err());
    }
}
