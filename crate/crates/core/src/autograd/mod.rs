//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every differentiable operation applied to tracked
//! [`Var`]s. Node ids are handed out in creation order, so walking ids in
//! reverse is a valid topological order for the backward sweep.
//!
//! Values live behind `Rc`, so a no-grad graph keeps nothing alive beyond the
//! variables the caller still holds.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod reduce;
mod resize;
mod shape;
mod spectral;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub use elementwise::broadcast_shape;
pub use norm::BatchStats;
pub(crate) use resize::resize_planes;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// Handle to a value produced inside a [`Graph`].
#[derive(Clone)]
pub struct Var {
    value: Rc<Tensor>,
    id: Option<usize>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("id", &self.id)
            .finish()
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub(crate) fn rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
    dry_run: bool,
    macs: Cell<u64>,
    conv_macs: Cell<u64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            dry_run: false,
            macs: Cell::new(0),
            conv_macs: Cell::new(0),
        }
    }

    /// Graph that records nothing; every result is an untracked constant.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Shape-only evaluation: heavy kernels (convolutions, matmuls) skip the
    /// arithmetic and emit zeros while still counting MACs.
    pub fn dry_run() -> Self {
        Self {
            grad_enabled: false,
            dry_run: true,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn is_dry_run(&self) -> bool {
        self.dry_run
    }

    /// Multiply-accumulate operations executed by conv/linear/matmul kernels so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    /// The convolution and transposed-convolution share of [`Graph::macs`].
    pub fn conv_macs(&self) -> u64 {
        self.conv_macs.get()
    }

    pub(crate) fn add_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    pub(crate) fn add_conv_macs(&self, n: u64) {
        self.conv_macs.set(self.conv_macs.get() + n);
        self.add_macs(n);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input. Untracked when gradients are disabled.
    pub fn leaf(&self, t: Tensor) -> Var {
        if !self.grad_enabled {
            return self.constant(t);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            value: Rc::new(t),
            id: Some(nodes.len() - 1),
        }
    }

    pub fn constant(&self, t: Tensor) -> Var {
        Var {
            value: Rc::new(t),
            id: None,
        }
    }

    /// Register an op result. `backward` receives the output gradient and a
    /// mask of which parents need a gradient, and returns one entry per parent.
    pub(crate) fn record<F>(&self, value: Tensor, parents: &[&Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let tracked = self.grad_enabled && parents.iter().any(|p| p.id.is_some());
        if !tracked {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            value: Rc::new(value),
            id: Some(nodes.len() - 1),
        }
    }

    /// Gradients of a single-element `root` with respect to every tracked leaf.
    pub fn backward(&self, root: &Var) -> Result<Gradients> {
        if root.value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar root, got {:?}",
                root.shape()
            ));
        }
        self.backward_with(root, Tensor::ones(root.shape()), &[])
    }

    /// Backward sweep seeded with `seed`; gradients of the `retain` variables
    /// are kept in addition to those of leaves.
    pub fn backward_with(&self, root: &Var, seed: Tensor, retain: &[&Var]) -> Result<Gradients> {
        if seed.shape() != root.shape() {
            return Err(shape_err!(
                "seed {:?} vs root {:?}",
                seed.shape(),
                root.shape()
            ));
        }
        let Some(root_id) = root.id else {
            return Ok(Gradients::default());
        };
        let nodes = self.nodes.borrow();
        let keep: std::collections::HashSet<usize> = retain.iter().filter_map(|v| v.id).collect();
        let mut grads: Vec<Option<Tensor>> = (0..=root_id).map(|_| None).collect();
        grads[root_id] = Some(seed);
        let mut out = HashMap::new();
        for i in (0..=root_id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.backward {
                None => {
                    out.insert(i, g);
                }
                Some(f) => {
                    let needs: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
                    let pgrads = f(&g, &needs);
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(pgrads) {
                        if let (Some(p), Some(pg)) = (p, pg) {
                            match &mut grads[*p] {
                                Some(acc) => acc.add_assign(&pg),
                                slot => *slot = Some(pg),
                            }
                        }
                    }
                    if keep.contains(&i) {
                        out.insert(i, g);
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

#[derive(Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        v.id.and_then(|id| self.grads.get(&id))
    }

    /// Gradient of `v`, or zeros of its shape when it did not influence the root.
    pub fn get_or_zeros(&self, v: &Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}
