use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Result, TensorError};
use crate::float::Float;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward record of one operation.
///
/// `backward` receives the output value and the upstream gradient and returns
/// one entry per input; `None` means "no gradient for that input".
pub trait GradFn<F: Float>: Send + Sync {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> &[Tensor<F>];
    fn backward(&self, output: &[F], grad: &[F]) -> Vec<Option<Vec<F>>>;
}

struct Node<F: Float> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<F>>>,
    grad_fn: Option<Box<dyn GradFn<F>>>,
}

/// N-dimensional array participating in a reverse-mode graph.
///
/// Cloning is cheap (shared node). Values are immutable once built; only the
/// gradient slot of a leaf is written, during [`Tensor::backward`].
pub struct Tensor<F: Float = f32> {
    node: Arc<Node<F>>,
}

impl<F: Float> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<F: Float> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.node.shape);
        if self.numel() <= 16 {
            s.field("data", &self.node.data);
        }
        if let Some(g) = &self.node.grad_fn {
            s.field("op", &g.name());
        }
        s.field("requires_grad", &self.node.requires_grad).finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Float> Tensor<F> {
    fn build(
        data: Vec<F>,
        shape: Vec<usize>,
        requires_grad: bool,
        grad_fn: Option<Box<dyn GradFn<F>>>,
    ) -> Self {
        debug_assert_eq!(data.len(), numel_of(&shape));
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel_of(shape) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Leaf with gradient tracking enabled.
    pub fn param(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel_of(shape) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    pub fn from_f64_slice(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| F::from_f64(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![F::zero(); numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self::build(vec![value; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: F) -> Self {
        Self::build(vec![value], vec![1], false, None)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![F::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = F::one();
        }
        Self::build(data, vec![n, n], false, None)
    }

    /// Result of an operation. Records `grad_fn` only when an input tracks
    /// gradients and recording is enabled on this thread.
    pub fn from_op(data: Vec<F>, shape: Vec<usize>, grad_fn: Box<dyn GradFn<F>>) -> Self {
        let track = is_grad_enabled() && grad_fn.inputs().iter().any(|t| t.requires_grad());
        if track {
            Self::build(data, shape, true, Some(grad_fn))
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.node.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.name())
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.node.data.clone(), self.node.shape.clone(), false, None)
    }

    pub fn same_data(&self, other: &Tensor<F>) -> bool {
        self.shape() == other.shape() && self.data() == other.data()
    }

    /// Propagates d(self)/d(leaf) into every tracked leaf reachable from
    /// `self`. Leaf gradients are summed onto whatever they already hold.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<F>> = HashMap::new();
        pending.insert(self.id(), vec![F::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.node.grad_fn {
                None => {
                    let mut slot = t.node.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let grads = f.backward(t.data(), &g);
                    for (input, grad) in f.inputs().iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(grad.len(), input.numel(), "grad of {}", f.name());
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(input.id(), grad);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over tracked nodes; each node appears once.
    fn topo_order(&self) -> Vec<Tensor<F>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // (node, children_pushed)
        let mut stack: Vec<(Tensor<F>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(f) = &t.node.grad_fn {
                for input in f.inputs().iter().rev() {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Number of distinct tracked nodes reachable from `self` (graph size).
    pub fn graph_len(&self) -> usize {
        self.topo_order().len()
    }
}
