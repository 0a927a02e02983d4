//! Parameter storage, initialisation and the small layers every module reuses.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Var;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter().filter(move |(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id)
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum WeightInit {
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    /// `N(0, 2 / fan_in)` for ReLU stacks.
    Kaiming,
    Zeros,
}

/// Registers parameters under a dotted name prefix.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_, T> {
        let prefix = self.full(name);
        Init { store: self.store, rng: self.rng, prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.full(name);
        self.store.insert(full, value)
    }

    /// Overwrites a parameter registered earlier.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        *self.store.value_mut(id) = value;
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::ones(shape))
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], scheme: WeightInit) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match scheme {
            WeightInit::Zeros => vec![T::zero(); n],
            WeightInit::TruncNormal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(self.rng);
                        if v.abs() <= 2.0 * std {
                            break c(v);
                        }
                    })
                    .collect()
            }
            WeightInit::Kaiming => {
                let fan_in = shape[0].max(1) as f64;
                let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                (0..n).map(|_| c(dist.sample(self.rng))).collect()
            }
        };
        self.tensor(name, Tensor::from_vec(shape, data))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| c(self.rng.random_range(lo..hi))).collect();
        self.tensor(name, Tensor::from_vec(shape, data))
    }
}

/// Affine map over the last axis; also serves as a 1x1 convolution on
/// channel-last `[h*w, C]` feature maps.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        scheme: WeightInit,
    ) -> Self {
        let mut s = init.scope(name);
        let weight = s.weight("weight", &[in_dim, out_dim], scheme);
        let bias = Some(s.zeros("bias", &[out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn no_bias<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        scheme: WeightInit,
    ) -> Self {
        let mut s = init.scope(name);
        let weight = s.weight("weight", &[in_dim, out_dim], scheme);
        Self { weight, bias: None, in_dim, out_dim }
    }

    pub fn forward<'g, T: Scalar>(&self, x: Var<'g, T>) -> Var<'g, T> {
        let g = x.graph();
        let y = x.matmul(g.param(self.weight));
        match self.bias {
            Some(b) => y.add(g.param(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize) -> Self {
        let mut s = init.scope(name);
        let gamma = s.ones("weight", &[dim]);
        let beta = s.zeros("bias", &[dim]);
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<'g, T: Scalar>(&self, x: Var<'g, T>) -> Var<'g, T> {
        let g = x.graph();
        x.normalize_last(c(self.eps)).mul(g.param(self.gamma)).add(g.param(self.beta))
    }
}

/// Row lookup table.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, rows: usize, dim: usize, scheme: WeightInit) -> Self {
        let table = init.weight(name, &[rows, dim], scheme);
        Self { table, rows, dim }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g crate::autograd::Graph<'g, T>, ids: &[usize]) -> Var<'g, T> {
        let index = Rc::new(ids.iter().map(|&i| Some(i)).collect());
        g.param(self.table).gather_rows(index)
    }
}
