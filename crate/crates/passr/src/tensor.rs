//! Dense row-major tensors.
//!
//! Layout convention: row-major (C order), last dimension fastest. Shapes are
//! plain `Vec<usize>`; a rank-0 tensor (empty shape) is a scalar with one
//! element. Data lives behind an `Arc` so clones are cheap and tensors are
//! immutable once built by an op.

use std::sync::Arc;

use rand::Rng;

use crate::error::TensorError;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::LengthMismatch { len: data.len(), shape: shape.to_vec() });
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::new(data) })
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![v]) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![v; numel]) }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..numel {
            data.push(f(&idx));
            // advance the multi-index, last dimension fastest
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    /// Uniform samples in [lo, hi).
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: T, hi: T, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let span = hi - lo;
        let data: Vec<T> = (0..numel).map(|_| lo + span * T::sample_unit(rng)).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Mutable access to the buffer; clones it first if shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Flat offset of a multi-index (debug-checked).
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[d], "index {i} out of range for dim {d} ({})", self.shape[d]);
            off = off * self.shape[d] + i;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    /// Same buffer, different shape; element counts must agree.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::LengthMismatch { len: self.numel(), shape: shape.to_vec() });
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data: Vec<T> = self.data.iter().map(|&x| f(x)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data.iter().map(|&x| U::of(x.to_f64())).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn iter_indices(&self) -> IndexIter {
        IndexIter::new(&self.shape)
    }

    /// Largest absolute element difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max))
    }
}

/// Iterates multi-indices of a shape in row-major order.
pub struct IndexIter {
    shape: Vec<usize>,
    next: Option<Vec<usize>>,
}

impl IndexIter {
    pub fn new(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        let next = if numel == 0 { None } else { Some(vec![0; shape.len()]) };
        IndexIter { shape: shape.to_vec(), next }
    }
}

impl Iterator for IndexIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let cur = self.next.clone()?;
        let mut nxt = cur.clone();
        let mut done = true;
        for d in (0..self.shape.len()).rev() {
            nxt[d] += 1;
            if nxt[d] < self.shape[d] {
                done = false;
                break;
            }
            nxt[d] = 0;
        }
        if done {
            self.next = None;
        } else {
            self.next = Some(nxt);
        }
        Some(cur)
    }
}

// ── Broadcasting ─────────────────────────────────────────────────────
//
// Trailing-dimension broadcasting: shapes are right-aligned, missing leading
// dimensions are treated as 1, and each aligned pair of extents must either
// match or one of them be 1 (that operand is repeated along the dimension).
// Example: (2,3) + (3,) -> (2,3); (4,1,5) * (2,5) -> (4,2,5).

/// Broadcast output shape, or an error when the shapes are incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides (in elements) of `shape` when broadcast to `out_rank` dimensions;
/// broadcast dimensions get stride 0 so repeated reads hit the same element.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[offset + d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Reduce a gradient of `grad_shape` back to `target_shape` by summing over
/// broadcast dimensions. Inverse of the implicit expansion above.
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, target_shape: &[usize]) -> Tensor<T> {
    if grad.shape() == target_shape {
        return grad.clone();
    }
    let out_numel: usize = target_shape.iter().product();
    let mut out = vec![T::zero(); out_numel];
    let strides = broadcast_strides(target_shape, grad.shape());
    let gshape = grad.shape().to_vec();
    let mut idx = vec![0usize; gshape.len()];
    for &g in grad.data() {
        let mut off = 0;
        for d in 0..gshape.len() {
            off += idx[d] * strides[d];
        }
        out[off] = out[off] + g;
        for d in (0..gshape.len()).rev() {
            idx[d] += 1;
            if idx[d] < gshape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(target_shape, out).expect("reduce_to_shape: length computed from shape")
}
