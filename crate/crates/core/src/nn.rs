//! Named parameter storage and the layer primitives the model is built from.
//!
//! Parameters live in a flat, name-sorted [`ParamStore`]; a [`Session`] binds
//! a store to one [`Graph`] for a single forward (and optional backward) pass.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Learnable parameters plus non-learnable buffers (batch-norm running stats).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    /// Total element count of learnable parameters (buffers excluded).
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Fold one batch's statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)], momentum: f64) {
        for (name, st) in updates {
            for (suffix, vals) in [("running_mean", &st.mean), ("running_var", &st.var_unbiased)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{name}.{suffix}")) {
                    for (r, v) in buf.data_mut().iter_mut().zip(vals.iter()) {
                        *r = (1.0 - momentum) * *r + momentum * v;
                    }
                }
            }
        }
    }
}

/// One forward pass over a [`ParamStore`].
pub struct Session<'a> {
    graph: Graph,
    store: &'a ParamStore,
    train: bool,
    leaves: RefCell<BTreeMap<String, Var>>,
    bn_updates: RefCell<Vec<(String, BatchStats)>>,
    taps: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Session<'a> {
    /// `train` selects batch statistics for batch norm; gradients are tracked
    /// whenever `graph` tracks them.
    pub fn new(store: &'a ParamStore, graph: Graph, train: bool) -> Self {
        Self {
            graph,
            store,
            train,
            leaves: RefCell::new(BTreeMap::new()),
            bn_updates: RefCell::new(Vec::new()),
            taps: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.param(name).is_some()
    }

    /// The parameter `name` as a graph leaf, created once per session.
    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return Ok(v.clone());
        }
        let t = self
            .store
            .param(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let v = self.graph.leaf(t.clone());
        self.leaves.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.store
            .buffer(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))
    }

    /// Remember an intermediate activation under `name` (for Grad-CAM).
    pub fn tap(&self, name: &str, v: &Var) {
        self.taps.borrow_mut().insert(name.to_string(), v.clone());
    }

    pub fn tapped(&self, name: &str) -> Option<Var> {
        self.taps.borrow().get(name).cloned()
    }

    pub fn tap_names(&self) -> Vec<String> {
        self.taps.borrow().keys().cloned().collect()
    }

    /// Gradients of every parameter touched in this session.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.leaves
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }

    pub fn take_bn_updates(&self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut *self.bn_updates.borrow_mut())
    }

    // ---- layers ---------------------------------------------------------

    /// Convolution `name.weight` with optional `name.bias`.
    pub fn conv(&self, name: &str, x: &Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.optional(&format!("{name}.bias"))?;
        self.graph.conv2d(x, &w, b.as_ref(), stride, pad, groups)
    }

    /// Same-padded stride-1 convolution.
    pub fn conv_same(&self, name: &str, x: &Var) -> Result<Var> {
        let k = self.store.param(&format!("{name}.weight")).map_or(1, |w| w.shape()[2]);
        let groups = match self.store.param(&format!("{name}.weight")) {
            Some(w) if w.shape()[1] == 1 && x.shape()[1] > 1 => x.shape()[1],
            _ => 1,
        };
        self.conv(name, x, 1, k / 2, groups)
    }

    pub fn conv_transpose(&self, name: &str, x: &Var, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.optional(&format!("{name}.bias"))?;
        self.graph.conv_transpose2d(x, &w, b.as_ref(), stride)
    }

    pub fn linear(&self, name: &str, x: &Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.optional(&format!("{name}.bias"))?;
        self.graph.linear(x, &w, b.as_ref())
    }

    pub fn batch_norm(&self, name: &str, x: &Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.weight"))?;
        let beta = self.param(&format!("{name}.bias"))?;
        if self.train {
            let (y, stats) = self.graph.batch_norm_train(x, &gamma, &beta, BN_EPS)?;
            self.bn_updates.borrow_mut().push((name.to_string(), stats));
            Ok(y)
        } else {
            let mean = self.buffer(&format!("{name}.running_mean"))?;
            let var = self.buffer(&format!("{name}.running_var"))?;
            self.graph.batch_norm_eval(x, &gamma, &beta, mean.data(), var.data(), BN_EPS)
        }
    }

    pub fn layer_norm(&self, name: &str, x: &Var, axis: usize) -> Result<Var> {
        let gamma = self.param(&format!("{name}.weight"))?;
        let beta = self.param(&format!("{name}.bias"))?;
        self.graph.layer_norm(x, axis, &gamma, &beta, LN_EPS)
    }

    /// `Σ scalar_i · x_i` over named scalar parameters.
    pub fn weighted_sum(&self, terms: &[(&str, &Var)]) -> Result<Var> {
        let mut parts = Vec::with_capacity(terms.len());
        for (name, x) in terms {
            let s = self.param(name)?;
            parts.push(self.graph.mul(x, &s)?);
        }
        self.graph.add_all(&parts)
    }

    /// Element `i` of the vector parameter `name`, as a one-element variable.
    pub fn param_elem(&self, name: &str, i: usize) -> Result<Var> {
        let v = self.param(name)?;
        self.graph.slice_axis(&v, 0, i, 1)
    }

    fn optional(&self, name: &str) -> Result<Option<Var>> {
        if self.has(name) {
            self.param(name).map(Some)
        } else {
            Ok(None)
        }
    }
}

/// Seeded parameter initialiser writing into a [`ParamStore`].
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, groups: usize, bias: bool) {
        let cpg = cin / groups;
        let w = self.uniform(&[cout, cpg, k, k], cpg * k * k);
        self.store.insert_param(format!("{name}.weight"), w);
        if bias {
            self.store.insert_param(format!("{name}.bias"), Tensor::zeros(&[cout]));
        }
    }

    pub fn depthwise(&mut self, name: &str, c: usize, k: usize) {
        self.conv(name, c, c, k, c, true);
    }

    pub fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let w = self.uniform(&[cin, cout, k, k], cin * k * k);
        self.store.insert_param(format!("{name}.weight"), w);
        self.store.insert_param(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) {
        let w = self.uniform(&[dout, din], din);
        self.store.insert_param(format!("{name}.weight"), w);
        self.store.insert_param(format!("{name}.bias"), Tensor::zeros(&[dout]));
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) {
        self.store.insert_param(format!("{name}.weight"), Tensor::ones(&[c]));
        self.store.insert_param(format!("{name}.bias"), Tensor::zeros(&[c]));
        self.store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        self.store.insert_buffer(format!("{name}.running_var"), Tensor::ones(&[c]));
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) {
        self.store.insert_param(format!("{name}.weight"), Tensor::ones(&[d]));
        self.store.insert_param(format!("{name}.bias"), Tensor::zeros(&[d]));
    }

    pub fn scalar(&mut self, name: &str, v: f64) {
        self.store.insert_param(name, Tensor::full(&[1], v));
    }

    pub fn vector(&mut self, name: &str, vals: Vec<f64>) {
        let n = vals.len();
        self.store.insert_param(name, Tensor::new(&[n], vals).expect("vector param"));
    }
}
