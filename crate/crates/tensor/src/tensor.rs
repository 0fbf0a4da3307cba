use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Result, TensorError};
use crate::rng::Rng;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Vector-Jacobian product of one recorded op.
///
/// Receives the gradient of the op output and a flag per parent telling
/// whether that parent needs a gradient. Returns one entry per parent.
pub(crate) type BackwardFn =
    Box<dyn Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>> + Send + Sync + 'static>;

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<f32>>,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: Option<BackwardFn>,
    pub(crate) grad: Mutex<Option<Vec<f32>>>,
}

impl Drop for Node {
    fn drop(&mut self) {
        // Unlink the graph iteratively; long chains would otherwise recurse
        // once per op and overflow small thread stacks.
        let mut stack: Vec<Arc<Node>> = std::mem::take(&mut self.parents)
            .into_iter()
            .map(|t| t.node)
            .collect();
        while let Some(node) = stack.pop() {
            if let Some(mut inner) = Arc::into_inner(node) {
                stack.extend(std::mem::take(&mut inner.parents).into_iter().map(|t| t.node));
            }
        }
    }
}

/// Dense row-major f32 tensor.
///
/// Values are immutable once built. Ops on tensors that require gradients
/// record themselves on an implicit tape (the parent links), which
/// [`Tensor::backward`] walks in reverse.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) node: Arc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f32> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

/// Runs `f` without recording any ops.
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

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Tensor {
    fn leaf(data: Arc<Vec<f32>>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                parents: Vec::new(),
                backward: None,
                grad: Mutex::new(None),
            }),
        }
    }

    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::leaf(Arc::new(data), shape.to_vec(), false))
    }

    pub fn from_slice(data: &[f32], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.to_vec(), shape)
    }

    pub fn scalar(v: f32) -> Self {
        Self::leaf(Arc::new(vec![v]), Vec::new(), false)
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        Self::leaf(Arc::new(vec![v; numel(shape)]), shape.to_vec(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn randn(shape: &[usize], std: f32, rng: &mut Rng) -> Self {
        Self::leaf(Arc::new(rng.normal_vec(numel(shape), std)), shape.to_vec(), false)
    }

    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut Rng) -> Self {
        Self::leaf(
            Arc::new(rng.uniform_vec(numel(shape), lo, hi)),
            shape.to_vec(),
            false,
        )
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::leaf(Arc::new(data), vec![n, n], false)
    }

    /// A fresh leaf sharing this tensor's values that participates in
    /// gradient tracking.
    pub fn requires_grad_leaf(&self) -> Self {
        Self::leaf(self.node.data.clone(), self.node.shape.clone(), true)
    }

    /// A fresh leaf sharing this tensor's values, cut from the tape.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.data.clone(), self.node.shape.clone(), false)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.node.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.node.data.to_vec()
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f32>> {
        self.node.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.backward.is_none()
    }

    /// Accumulated gradient of a leaf after [`Tensor::backward`].
    pub fn grad(&self) -> Option<Tensor> {
        let g = self.node.grad.lock().expect("grad lock poisoned");
        g.as_ref()
            .map(|g| Tensor::leaf(Arc::new(g.clone()), self.node.shape.clone(), false))
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.node.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Records an op result. Falls back to a plain leaf when no parent
    /// tracks gradients or recording is disabled.
    pub(crate) fn from_op(
        data: Vec<f32>,
        shape: Vec<usize>,
        parents: &[&Tensor],
        backward: impl Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>> + Send + Sync + 'static,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Self::leaf(Arc::new(data), shape, false);
        }
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: Arc::new(data),
                requires_grad: true,
                parents: parents.iter().map(|p| (*p).clone()).collect(),
                backward: Some(Box::new(backward)),
                grad: Mutex::new(None),
            }),
        }
    }

    /// Same as [`Tensor::from_op`] but shares an existing buffer.
    pub(crate) fn from_op_shared(
        data: Arc<Vec<f32>>,
        shape: Vec<usize>,
        parents: &[&Tensor],
        backward: impl Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>> + Send + Sync + 'static,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Self::leaf(data, shape, false);
        }
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad: true,
                parents: parents.iter().map(|p| (*p).clone()).collect(),
                backward: Some(Box::new(backward)),
                grad: Mutex::new(None),
            }),
        }
    }
}
