//! Learnable parameter storage, gradient buffers, and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which optimizer owns a parameter. Link-prediction parameters (encoder and
/// decoder) and restarter parameters are stepped by separate optimizers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Model,
    Restarter,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.groups.push(group);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }
}

/// Per-parameter gradient accumulators. `None` means the parameter took no
/// part in the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { slots: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds `g` into rows `rows` of the gradient of a `shape`-sized parameter.
    pub fn accumulate_rows(&mut self, id: ParamId, shape: (usize, usize), rows: &[usize], g: &Mat) {
        let acc = self.slots[id.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
        for (k, &r) in rows.iter().enumerate() {
            for (a, b) in acc.row_mut(r).iter_mut().zip(g.row(k)) {
                *a += b;
            }
        }
    }

    pub fn merge(&mut self, other: &Grads) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    /// True when some touched parameter of `group` has a non-zero gradient.
    pub fn any_nonzero(&self, store: &ParamStore, group: ParamGroup) -> bool {
        self.slots.iter().enumerate().any(|(i, g)| {
            store.group(ParamId(i)) == group && g.as_ref().is_some_and(|g| g.data().iter().any(|&x| x != 0.0))
        })
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Averages a set of per-worker gradients. Workers that did not touch a
    /// parameter count as zero.
    pub fn average(parts: &[Grads]) -> Grads {
        assert!(!parts.is_empty());
        let mut out = Grads { slots: vec![None; parts[0].slots.len()] };
        for p in parts {
            out.merge(p);
        }
        if parts.len() > 1 {
            out.scale(1.0 / parts.len() as f64);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub group: ParamGroup,
    pub step: u64,
    pub first: Vec<Option<Mat>>,
    pub second: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(config: AdamConfig, group: ParamGroup, store: &ParamStore) -> Self {
        Self { config, group, step: 0, first: vec![None; store.len()], second: vec![None; store.len()] }
    }

    /// Applies one update to every parameter of this optimizer's group that
    /// received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        let touched: Vec<ParamId> =
            store.ids().filter(|&id| store.group(id) == self.group && grads.get(id).is_some()).collect();
        if touched.is_empty() {
            return;
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in touched {
            let g = grads.get(id).expect("filtered above");
            let value = store.get_mut(id);
            let m = self.first[id.0].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let v = self.second[id.0].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (((w, &gi), mi), vi) in value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
