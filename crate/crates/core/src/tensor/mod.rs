//! Dense f64 tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node in a computation
//! graph. Operations whose inputs track gradients record a backward closure;
//! [`Tensor::backward`] walks the graph in reverse topological order and
//! accumulates gradients into the tracked leaves.

mod ops;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub use ops::{broadcast_shape, matmul_naive};

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to the op output.
    pub grad_out: &'a [f64],
    /// Forward output values.
    pub out: &'a [f64],
    /// Which parents require a gradient.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward closures on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl Tensor {
    fn from_node(node: Node) -> Self {
        Tensor(Arc::new(node))
    }

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "shape {shape:?} does not describe {} elements",
                data.len()
            )));
        }
        Ok(Self::raw(data, shape.to_vec()))
    }

    pub(crate) fn raw(data: Vec<f64>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Self::from_node(Node {
            data,
            shape,
            requires_grad: false,
            grad: Mutex::new(None),
            grad_fn: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(vec![v], vec![1])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::raw(vec![v; shape.iter().product()], shape.to_vec())
    }

    /// A leaf that accumulates gradients during [`Tensor::backward`].
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Self::new(data, shape)?.into_leaf())
    }

    /// Copy of this tensor's values as a fresh tracked leaf.
    pub fn into_leaf(self) -> Self {
        Self::from_node(Node {
            data: self.0.data.clone(),
            shape: self.0.shape.clone(),
            requires_grad: true,
            grad: Mutex::new(None),
            grad_fn: None,
        })
    }

    /// Copy of the values without any graph history.
    pub fn detach(&self) -> Self {
        Self::raw(self.0.data.clone(), self.0.shape.clone())
    }

    /// Builds the output of a custom op. The backward closure is kept only
    /// when some parent tracks gradients and grad recording is enabled.
    pub fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        Self::from_node(Node {
            data,
            shape,
            requires_grad: track,
            grad: Mutex::new(None),
            grad_fn: if track {
                Some(GradFn { parents, backward })
            } else {
                None
            },
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: isize) -> usize {
        self.0.shape[self.axis(axis)]
    }

    pub(crate) fn axis(&self, axis: isize) -> usize {
        if axis < 0 {
            (self.ndim() as isize + axis) as usize
        } else {
            axis as usize
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().unwrap() = None;
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Reverse-mode pass from a scalar loss. Gradients accumulate into every
    /// tracked leaf reachable from `self`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "loss is not connected to any tracked tensor".into(),
            ));
        }

        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(Arc::as_ptr(&self.0), vec![1.0]);

        for t in order.iter().rev() {
            let key = Arc::as_ptr(&t.0);
            let Some(g) = grads.remove(&key) else {
                continue;
            };
            match &t.0.grad_fn {
                Some(gf) => {
                    let needs: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
                    let ctx = BackwardCtx {
                        grad_out: &g,
                        out: &t.0.data,
                        needs: &needs,
                    };
                    let parent_grads = (gf.backward)(&ctx);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len());
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.entry(Arc::as_ptr(&p.0)) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                for (a, b) in e.get_mut().iter_mut().zip(&pg) {
                                    *a += b;
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.0.grad.lock().unwrap();
                    match slot.as_mut() {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Arc::as_ptr(&t.0);
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains(&Arc::as_ptr(&p.0)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests;
