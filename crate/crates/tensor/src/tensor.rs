//! Tensor handle, leaf construction and the reverse-mode tape.
//!
//! Every op output records its parents and a closure mapping the output
//! gradient to one optional gradient per parent. The graph is implicit in
//! those parent links; `backward` walks it in reverse topological order.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::{with_dtype, DType, Element, Result, Storage, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any op on the tape.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) type BackwardFn = Box<dyn Fn(&Storage) -> Vec<Option<Storage>> + Send + Sync>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Storage>,
    grad: Mutex<Option<Storage>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Reference-counted handle to a dense row-major tensor.
///
/// Cloning is cheap and aliases the same storage. Data is immutable once
/// created except through [`Tensor::update`], which the optimizer uses on
/// leaf parameters between steps.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("dtype", &self.dtype())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        storage: Storage,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), storage.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(storage),
            grad: Mutex::new(None),
            requires_grad,
            parents,
            backward,
        }))
    }

    /// Constant leaf from a buffer; fails when the buffer length disagrees
    /// with the shape.
    pub fn from_storage(storage: Storage, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != storage.len() {
            return Err(TensorError::shape("from_storage", shape, &[storage.len()]));
        }
        Ok(Tensor::build(storage, shape.to_vec(), false, Vec::new(), None))
    }

    pub fn from_vec<T: Element>(values: Vec<T>, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_storage(T::wrap(values), shape)
    }

    pub fn from_f64(values: &[f64], shape: &[usize], dtype: DType) -> Result<Tensor> {
        Tensor::from_storage(Storage::from_f64(values, dtype), shape)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        Tensor::build(Storage::zeros(dtype, numel(shape)), shape.to_vec(), false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Tensor {
        let values = vec![value; numel(shape)];
        Tensor::build(Storage::from_f64(&values, dtype), shape.to_vec(), false, Vec::new(), None)
    }

    pub fn scalar(value: f64, dtype: DType) -> Tensor {
        Tensor::full(&[], value, dtype)
    }

    /// Trainable leaf with the same contents as `self`.
    pub fn into_param(self) -> Tensor {
        let storage = self.storage().clone();
        Tensor::build(storage, self.0.shape.clone(), true, Vec::new(), None)
    }

    /// Op output. The tape entry is only kept when gradients are enabled and
    /// some parent requires them.
    pub(crate) fn from_op(
        storage: Storage,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: impl Fn(&Storage) -> Vec<Option<Storage>> + Send + Sync + 'static,
    ) -> Tensor {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor::build(storage, shape, true, parents, Some(Box::new(backward)))
        } else {
            Tensor::build(storage, shape, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn dtype(&self) -> DType {
        self.storage().dtype()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// True when both handles alias the same node.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub fn storage(&self) -> RwLockReadGuard<'_, Storage> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec_f64(&self) -> Vec<f64> {
        self.storage().to_f64_vec()
    }

    pub fn to_vec<T: Element>(&self) -> Vec<T> {
        T::slice(&self.storage()).to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.storage().get_f64(0)
    }

    /// Constant copy cut off from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.storage().clone(), self.0.shape.clone(), false, Vec::new(), None)
    }

    /// Deep copy that keeps the trainable flag but shares nothing.
    pub fn deep_clone(&self) -> Tensor {
        Tensor::build(
            self.storage().clone(),
            self.0.shape.clone(),
            self.0.requires_grad && self.is_leaf(),
            Vec::new(),
            None,
        )
    }

    /// In-place mutation of a leaf's data, used between optimizer steps.
    pub fn update(&self, f: impl FnOnce(&mut Storage)) {
        assert!(self.is_leaf(), "update() on a non-leaf tensor");
        let mut guard = self.0.data.write().expect("tensor data lock poisoned");
        let len = guard.len();
        f(&mut guard);
        assert_eq!(guard.len(), len, "update() changed the buffer length");
    }

    /// Replace a leaf's contents; dtype and length must match.
    pub fn assign(&self, storage: &Storage) -> Result<()> {
        if storage.dtype() != self.dtype() {
            return Err(TensorError::DType {
                op: "assign",
                lhs: self.dtype(),
                rhs: storage.dtype(),
            });
        }
        if storage.len() != self.numel() {
            return Err(TensorError::shape("assign", self.shape(), &[storage.len()]));
        }
        self.update(|s| *s = storage.clone());
        Ok(())
    }

    pub fn grad(&self) -> Option<Storage> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn grad_f64(&self) -> Option<Vec<f64>> {
        self.grad().map(|g| g.to_f64_vec())
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub fn set_grad(&self, grad: Option<Storage>) {
        *self.0.grad.lock().expect("grad lock poisoned") = grad;
    }

    fn accumulate_grad(&self, g: Storage) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(existing) => existing.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into the
    /// `grad` slot of every trainable leaf reachable from `self`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topological_order();
        let mut pending: HashMap<u64, Storage> = HashMap::new();
        pending.insert(self.id(), {
            let mut one = Storage::zeros(self.dtype(), 1);
            with_dtype!(self.dtype(), T, {
                T::slice_mut(&mut one)[0] = T::one();
            });
            one
        });

        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                None => node.accumulate_grad(grad),
                Some(backward) => {
                    let parent_grads = backward(&grad);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, g) in node.0.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                pending.insert(parent.id(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over trainable nodes (parents before children).
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, next)) = stack.pop() {
            if next < node.0.parents.len() {
                let parent = node.0.parents[next].clone();
                stack.push((node, next + 1));
                if parent.requires_grad() && visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}
