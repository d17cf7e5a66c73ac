//! Named parameter storage and binding into a [`Graph`].
//!
//! Parameters are addressed by dotted hierarchical names such as
//! `micro_ta.layer0.x.attn.wq`. Each tensor is initialised from its own
//! RNG stream derived from the model seed and the name, so adding or
//! removing a block never changes the initial values of the others.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot-normal using the first two extents as fan-in/fan-out.
    Xavier,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter declarations under a prefix.
#[derive(Debug, Default)]
pub struct ParamSpecs {
    specs: Vec<ParamSpec>,
    prefix: Vec<String>,
}

impl ParamSpecs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        self.specs.push(ParamSpec {
            name: full,
            shape: shape.to_vec(),
            init,
        });
    }

    /// Runs `f` with `name` appended to the current prefix.
    pub fn scoped(&mut self, name: &str, f: impl FnOnce(&mut Self)) {
        self.prefix.push(name.to_string());
        f(self);
        self.prefix.pop();
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }
}

/// Stable 64-bit FNV-1a, used to derive per-parameter seeds.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct McanParams {
    entries: BTreeMap<String, Tensor>,
}

impl McanParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init(specs: &ParamSpecs, seed: u64) -> Self {
        let mut entries = BTreeMap::new();
        for spec in specs.specs() {
            let numel: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::Xavier => {
                    let fan_in = spec.shape.first().copied().unwrap_or(1);
                    let fan_out = spec.shape.get(1).copied().unwrap_or(1);
                    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(spec.name.as_bytes()));
                    let normal = Normal::new(0.0, std).expect("finite std");
                    (0..numel).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            let t = Tensor::new(spec.shape.clone(), data).expect("spec shape matches data").with_requires_grad();
            entries.insert(spec.name.clone(), t);
        }
        Self { entries }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Inserts every tensor as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.entries {
            vars.insert(name.clone(), g.param(t)?);
        }
        Ok(BoundParams { vars })
    }

    /// Copies gradients from a graph after `backward` into each tensor's
    /// `grad` slot. Parameters the loss does not depend on get zeros.
    pub fn collect_grads(&mut self, g: &Graph, bound: &BoundParams) -> Result<()> {
        for (name, t) in self.entries.iter_mut() {
            let var = bound.var(name)?;
            let grad = match g.grad_data(var) {
                Some(d) => Tensor::new(t.shape().to_vec(), d.to_vec())?,
                None => Tensor::zeros(t.shape()),
            };
            t.grad = Some(Box::new(grad));
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.grad = None;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn scope(&self) -> Scope<'_> {
        Scope {
            bound: self,
            prefix: String::new(),
        }
    }
}

/// A prefix view over bound parameters.
#[derive(Clone, Debug)]
pub struct Scope<'a> {
    bound: &'a BoundParams,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn child(&self, name: &str) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope { bound: self.bound, prefix }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        if self.prefix.is_empty() {
            self.bound.var(name)
        } else {
            self.bound.var(&format!("{}.{name}", self.prefix))
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.var(name).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> ParamSpecs {
        let mut s = ParamSpecs::new();
        s.scoped("a", |s| {
            s.add("w", &[3, 4], Init::Xavier);
            s.add("b", &[4], Init::Zeros);
        });
        s.add("g", &[4], Init::Ones);
        s
    }

    #[test]
    fn hierarchical_names() {
        let p = McanParams::init(&specs(), 1);
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["a.b", "a.w", "g"]);
        assert!(p.get("g").unwrap().data().iter().all(|v| *v == 1.0));
        assert!(p.get("a.b").unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn init_is_independent_of_other_blocks() {
        let full = McanParams::init(&specs(), 9);
        let mut only = ParamSpecs::new();
        only.scoped("a", |s| s.add("w", &[3, 4], Init::Xavier));
        let partial = McanParams::init(&only, 9);
        assert_eq!(full.get("a.w"), partial.get("a.w"));
        let other_seed = McanParams::init(&only, 10);
        assert_ne!(full.get("a.w"), other_seed.get("a.w"));
    }

    #[test]
    fn scope_lookup() {
        let p = McanParams::init(&specs(), 1);
        let mut g = Graph::new();
        let bound = p.bind(&mut g).unwrap();
        let s = bound.scope().child("a");
        assert!(s.var("w").is_ok());
        assert!(matches!(s.var("nope"), Err(Error::MissingParam(n)) if n == "a.nope"));
    }
}
