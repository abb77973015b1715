//! Named parameter storage, tape binding and the Adam optimizer.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{Grads, Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Mat>,
    frozen: Vec<bool>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let m = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.add(name, m)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)))
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn count_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Lazily places parameters on a tape, once per tape.
pub struct Binder<'p> {
    params: &'p Params,
    bound: HashMap<ParamId, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p Params) -> Self {
        Self {
            params,
            bound: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        *self
            .bound
            .entry(id)
            .or_insert_with(|| tape.leaf(self.params.get(id).clone()))
    }

    /// Gradients of every bound, trainable parameter.
    pub fn collect(&self, grads: &mut Grads) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<(ParamId, Mat)> = self
            .bound
            .iter()
            .filter(|(id, _)| !self.params.is_frozen(**id))
            .filter_map(|(&id, &v)| grads.take(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

/// Sum gradient lists from several tapes.
pub fn merge_grads(into: &mut Vec<(ParamId, Mat)>, more: Vec<(ParamId, Mat)>) {
    for (id, g) in more {
        match into.iter_mut().find(|(i, _)| *i == id) {
            Some((_, acc)) => *acc += &g,
            None => into.push((id, g)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 5.0,
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    m: HashMap<ParamId, Mat>,
    v: HashMap<ParamId, Mat>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: HashMap::new(),
            v: HashMap::new(),
            step: 0,
        }
    }

    /// One update with learning rate `lr`.
    pub fn step(&mut self, params: &mut Params, grads: &[(ParamId, Mat)], lr: f64) {
        self.step += 1;
        let c = self.config;
        let scale = if c.clip_norm > 0.0 {
            let norm = grads.iter().map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
            if norm > c.clip_norm {
                c.clip_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads {
            if params.is_frozen(*id) {
                continue;
            }
            let m = self.m.entry(*id).or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v.entry(*id).or_insert_with(|| Mat::zeros(g.dim()));
            let p = params.get_mut(*id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * scale;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= lr * (update + c.weight_decay * *p);
            });
        }
    }
}

/// Cosine decay from `base` to `base · floor` over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize, floor: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
