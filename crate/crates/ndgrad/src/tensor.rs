use std::sync::Arc;

use crate::tape::NodeRef;
use crate::{NdError, Result, Scalar};

/// A dense row-major tensor.
///
/// Data is shared behind an `Arc`, so clones are cheap. When a tensor was
/// produced by an operation recorded on a tape it carries a node reference;
/// [`Tensor::detach`] strips it.
#[derive(Clone)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    pub(crate) node: Option<NodeRef<S>>,
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &&self.data[..self.data.len().min(8)])
            .field("traced", &self.node.is_some())
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from a flat row-major buffer. All values must be
    /// finite and `shape` must account for every element.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NdError::ShapeMismatch {
                op: "from_vec",
                details: format!("shape {:?} holds {} elements, got {}", shape, numel, data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NdError::NonFinite { op: "from_vec" });
        }
        Ok(Self { shape, data: Arc::new(data), node: None })
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![], data: Arc::new(vec![v]), node: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new(vec![S::zero(); numel]), node: None }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new(vec![v; numel]), node: None }
    }

    /// Internal constructor for op outputs; skips the finiteness scan
    /// (callers check via `ensure_finite`).
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: Arc::new(data), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Extracts the value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(NdError::NotScalar { shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    /// Value at a multi-dimensional index (row-major). Panics on
    /// out-of-bounds access; intended for tests and small readers.
    pub fn at(&self, idx: &[usize]) -> S {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            assert!(i < self.shape[d], "index out of bounds");
            flat = flat * self.shape[d] + i;
        }
        self.data[flat]
    }

    /// True for leaves registered as parameters on a tape.
    pub fn requires_grad(&self) -> bool {
        self.node.as_ref().map_or(false, |n| n.requires_grad)
    }

    /// Whether this tensor participates in a recorded computation.
    pub fn is_traced(&self) -> bool {
        self.node.is_some()
    }

    /// A copy sharing the same buffer but detached from any tape.
    pub fn detach(&self) -> Self {
        Self { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(NdError::NonFinite { op });
        }
        Ok(())
    }

    pub(crate) fn with_node(mut self, node: NodeRef<S>) -> Self {
        self.node = Some(node);
        self
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Broadcast shape of two operands under trailing-dimension alignment with
/// singleton expansion.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let da = if d < rank - a.len() { 1 } else { a[d - (rank - a.len())] };
        let db = if d < rank - b.len() { 1 } else { b[d - (rank - b.len())] };
        out[d] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(NdError::ShapeMismatch {
                op,
                details: format!("cannot broadcast {:?} with {:?}", a, b),
            });
        };
    }
    Ok(out)
}

/// Strides for reading an operand of shape `shape` as if broadcast to
/// `out_shape`: broadcast dimensions get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let native = strides_for(shape);
    let offset = out_shape.len() - shape.len();
    let mut out = vec![0; out_shape.len()];
    for d in 0..out_shape.len() {
        if d >= offset && shape[d - offset] != 1 {
            out[d] = native[d - offset];
        }
    }
    out
}

/// Iterates all multi-indices of `shape`, calling `f(out_linear, a_linear,
/// b_linear)` with the linear offsets of the two broadcast operands.
pub(crate) fn for_each_broadcast2(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut a_off = 0usize;
    let mut b_off = 0usize;
    for lin in 0..numel {
        f(lin, a_off, b_off);
        // increment the multi-index from the innermost dimension
        for d in (0..rank).rev() {
            idx[d] += 1;
            a_off += a_strides[d];
            b_off += b_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            a_off -= a_strides[d] * out_shape[d];
            b_off -= b_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (laid out as `grad_shape`) down to `target` shape, undoing a
/// broadcast. `target` must be broadcastable to `grad_shape`.
pub(crate) fn reduce_to_shape<S: Scalar>(
    grad: &[S],
    grad_shape: &[usize],
    target: &[usize],
) -> Vec<S> {
    if grad_shape == target {
        return grad.to_vec();
    }
    let t_strides = broadcast_strides(target, grad_shape);
    let numel: usize = target.iter().product();
    let mut out = vec![S::zero(); numel];
    let zero = vec![0usize; grad_shape.len()];
    for_each_broadcast2(grad_shape, &t_strides, &zero, |lin, t_off, _| {
        out[t_off] += grad[lin];
    });
    out
}
