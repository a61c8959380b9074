//! Named parameter tensors with per-parameter freeze flags, and gradient maps.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::BlockParams;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub frozen: bool,
}

/// How a parameter is initialized; weights carry their fan-in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitRule {
    /// Zero-mean normal with std `sqrt(2 / ((1 + slope²) · fan_in))`.
    FanIn { fan_in: usize },
    Zeros,
    Ones,
}

impl InitRule {
    pub fn std(&self, slope: f64) -> f64 {
        match *self {
            InitRule::FanIn { fan_in } => (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt(),
            InitRule::Zeros | InitRule::Ones => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitRule,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hierarchical `a/b/c` parameter collection. Every parameter carries exactly
/// one freeze flag.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    pub rng_seed: u64,
}

impl ParamStore {
    /// Instantiate a layout. Each parameter draws from its own stream keyed by
    /// `(seed, name)`, so a subtree's initial values do not depend on what
    /// else is in the layout.
    pub fn init(layout: &[ParamSpec], seed: u64, slope: f64) -> Self {
        let mut params = BTreeMap::new();
        for spec in layout {
            let len: usize = spec.shape.iter().product();
            let data = match spec.init {
                InitRule::Zeros => vec![0.0; len],
                InitRule::Ones => vec![1.0; len],
                rule @ InitRule::FanIn { .. } => {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ name_hash(&spec.name));
                    let normal = Normal::new(0.0, rule.std(slope)).expect("finite std");
                    (0..len).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            params.insert(
                spec.name.clone(),
                Param {
                    shape: spec.shape.clone(),
                    data,
                    frozen: false,
                },
            );
        }
        ParamStore {
            params,
            rng_seed: seed,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.params.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::SpecMismatch(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::SpecMismatch(format!("missing parameter {name}")))
    }

    pub fn data(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.data)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters whose name starts with `prefix/`.
    pub fn subtree<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Param)> + 'a {
        self.params.iter().filter(move |(k, _)| in_subtree(k, prefix))
    }

    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (k, p) in self.params.iter_mut() {
            if in_subtree(k, prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn any_trainable(&self, prefix: &str) -> bool {
        self.subtree(prefix).any(|(_, p)| !p.frozen)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.params.values().filter(|p| !p.frozen).map(|p| p.data.len()).sum()
    }

    pub fn freeze_flags(&self) -> BTreeMap<String, bool> {
        self.params.iter().map(|(k, p)| (k.clone(), p.frozen)).collect()
    }

    /// Copy every `from/…` parameter of `source` into `to/…` of `self`,
    /// requiring identical shapes.
    pub fn copy_subtree(&mut self, source: &ParamStore, from: &str, to: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, param) in source.subtree(from) {
            let target = format!("{to}{}", &name[from.len()..]);
            let dst = self.get_mut(&target)?;
            if dst.shape != param.shape {
                return Err(Error::SpecMismatch(format!(
                    "{target}: shape {:?} vs source {:?}",
                    dst.shape, param.shape
                )));
            }
            dst.data.clone_from(&param.data);
            copied += 1;
        }
        let expected = self.subtree(to).count();
        if copied != expected {
            return Err(Error::SpecMismatch(format!(
                "subtree {to} has {expected} parameters but source {from} supplied {copied}"
            )));
        }
        Ok(copied)
    }

    pub fn block<'a>(&'a self, prefix: &str) -> Result<BlockParams<'a>> {
        Ok(BlockParams {
            weight: self.data(&format!("{prefix}/conv/weight"))?,
            bias: self.data(&format!("{prefix}/conv/bias"))?,
            gamma: self.data(&format!("{prefix}/norm/gamma"))?,
            beta: self.data(&format!("{prefix}/norm/beta"))?,
        })
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.frozen)
    }

    /// Largest absolute parameter value, used in divergence diagnostics.
    pub fn max_abs(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.data.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// `name` lies under `prefix/`; the empty prefix is the whole store.
pub fn in_subtree(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || name.len() > prefix.len() && name.starts_with(prefix) && name.as_bytes()[prefix.len()] == b'/'
}

/// Gradient accumulator keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: String, grad: Vec<f64>) {
        match self.grads.get_mut(&name) {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(&grad) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(name, grad);
            }
        }
    }

    /// Accumulate the four gradients of a conv block under `prefix` if trainable.
    pub(crate) fn accumulate_block(&mut self, store: &ParamStore, prefix: &str, g: crate::layers::BlockGrads) {
        let entries = [
            ("conv/weight", g.weight),
            ("conv/bias", g.bias),
            ("norm/gamma", g.gamma),
            ("norm/beta", g.beta),
        ];
        for (suffix, grad) in entries {
            let name = format!("{prefix}/{suffix}");
            if !store.is_frozen(&name) {
                self.accumulate(name, grad);
            }
        }
    }

    pub(crate) fn accumulate_if_trainable(&mut self, store: &ParamStore, name: String, grad: Vec<f64>) {
        if !store.is_frozen(&name) {
            self.accumulate(name, grad);
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Vec<f64>) {
        self.grads.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.grads.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.grads.keys()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
}
