use std::collections::{BTreeMap, HashMap};

use crate::autograd::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Named parameters plus non-trainable buffers (batch-norm running stats).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor<f32>>,
    buffers: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<f32>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.buffers
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor<f32>)> {
        self.params.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Truncated normal (±2σ) weights.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) {
        let t = Tensor::from_fn(shape, |_| loop {
            let z = rng.normal();
            if z.abs() <= 2.0 {
                break (z * std) as f32;
            }
        });
        self.insert(name, t);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], v: f32) {
        self.insert(name, Tensor::full(shape, v));
    }
}

/// Accumulated gradients by parameter name.
pub type Grads = BTreeMap<String, Tensor<f32>>;

/// Running-statistics observation from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub count: usize,
}

/// One forward pass: tape, parameter leaves and training flag.
pub struct Ctx<'a> {
    pub graph: Graph,
    params: &'a ParamStore,
    train: bool,
    leaves: HashMap<String, Var>,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    /// Training context: records the tape and uses batch statistics.
    pub fn train(params: &'a ParamStore) -> Self {
        Self::new(params, true, true)
    }

    /// Inference context: nothing recorded, running statistics.
    pub fn eval(params: &'a ParamStore) -> Self {
        Self::new(params, false, false)
    }

    pub fn new(params: &'a ParamStore, record: bool, train: bool) -> Self {
        Ctx {
            graph: Graph::new(record),
            params,
            train,
            leaves: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.leaves.get(name) {
            return Ok(v.clone());
        }
        let t = self.params.get(name)?.clone();
        let v = if self.graph.is_recording() {
            self.graph.leaf(t)
        } else {
            Var::constant(t)
        };
        self.leaves.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Parameter viewed with a different shape (e.g. a conv kernel as a matrix).
    pub fn param_as(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        self.param(name)?.reshape(shape)
    }

    /// Reverse sweep from `loss`, returning gradients for every parameter
    /// touched in this pass.
    pub fn backward(&self, loss: &Var) -> Result<Grads> {
        let mut g = self.graph.backward(loss)?;
        let mut out = Grads::new();
        for (name, v) in &self.leaves {
            let t = self.params.get(name)?;
            let data = v
                .id()
                .and_then(|id| g.take(id))
                .unwrap_or_else(|| vec![0.0; t.len()]);
            out.insert(name.clone(), Tensor::from_vec(t.shape(), data)?);
        }
        Ok(out)
    }
}
