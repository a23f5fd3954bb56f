//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! A [`Tape`] records one node per primitive op; a [`Var`] owns its value
//! and an optional node id. When the tape is built with gradients disabled
//! (or an op's inputs are all untracked constants) nothing is recorded, so
//! inference runs with the same code path and intermediate buffers are
//! dropped as their `Var`s go out of scope.
//!
//! Values are validated for finiteness as they are produced: an overflow
//! anywhere surfaces as `TensorError::NonFinite` at the op that made it
//! rather than as a poisoned loss many steps later.

use std::cell::RefCell;

use crate::error::TensorError;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{broadcast_shape, reduce_to_shape, Tensor};

/// Where an op input came from: a recorded node, or an untracked constant.
#[derive(Clone, Copy, Debug)]
enum Slot {
    Node(usize),
    Constant,
}

enum Op<T: Scalar> {
    Leaf,
    Add { a: Slot, b: Slot, a_shape: Vec<usize>, b_shape: Vec<usize> },
    Sub { a: Slot, b: Slot, a_shape: Vec<usize>, b_shape: Vec<usize> },
    Mul { a: Slot, b: Slot, a_val: Tensor<T>, b_val: Tensor<T> },
    Scale { a: Slot, c: T },
    Abs { a: Slot, a_val: Tensor<T> },
    LeakyRelu { a: Slot, a_val: Tensor<T>, slope: T },
    SumAll { a: Slot, a_shape: Vec<usize> },
    Matmul { a: Slot, b: Slot, a_val: Tensor<T>, b_val: Tensor<T> },
    TransposeLast2 { a: Slot },
    SoftmaxLast { a: Slot, y: Tensor<T> },
    Conv2d { x: Slot, k: Slot, b: Slot, x_val: Tensor<T>, k_val: Tensor<T>, dilation: usize },
    PixelShuffle { a: Slot, s: usize },
    ConcatLast { slots: Vec<Slot>, widths: Vec<usize> },
    Slice { a: Slot, a_shape: Vec<usize>, start: Vec<usize> },
    Reshape { a: Slot, a_shape: Vec<usize> },
}

struct Node<T: Scalar> {
    op: Op<T>,
}

/// Records the computation graph for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

/// A tensor value bound to a tape. Cheap to clone (the buffer is shared).
#[derive(Clone)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    value: Tensor<T>,
    node: Option<usize>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the backward root wrt `var`, if `var` was tracked and
    /// reached by the sweep.
    pub fn wrt(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.node.and_then(|id| self.by_node.get(id).and_then(|g| g.as_ref()))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A tape that records nothing; every op runs forward-only.
    pub fn no_grad() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// A differentiable leaf (parameter or input that needs a gradient).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let node = if self.grad_enabled {
            Some(self.push(Node { op: Op::Leaf }))
        } else {
            None
        };
        Var { tape: self, value, node }
    }

    /// An untracked constant; ops on constants alone record nothing.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var { tape: self, value, node: None }
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn record(&self, inputs_tracked: bool, op: Op<T>) -> Option<usize> {
        if self.grad_enabled && inputs_tracked {
            Some(self.push(Node { op }))
        } else {
            None
        }
    }

    /// Reverse sweep from a scalar root. Fan-out accumulates additively;
    /// nodes the root does not depend on keep a `None` gradient.
    pub fn backward(&self, root: &Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        let root_id = root.node.ok_or(TensorError::InvalidArg {
            op: "backward",
            msg: "root is not tracked on this tape".into(),
        })?;
        if !root.value.is_scalar() {
            return Err(TensorError::BadShape {
                op: "backward",
                expected: "scalar root".into(),
                got: root.value.shape().to_vec(),
            });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[root_id] = Some(Tensor::scalar(T::one()));
        for id in (0..=root_id).rev() {
            // leaves keep their accumulated gradient for the caller
            if matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            // interior gradients are consumed as the sweep passes them
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add { a, b, a_shape, b_shape } => {
                    accumulate(&mut grads, *a, reduce_to_shape(&g, a_shape));
                    accumulate(&mut grads, *b, reduce_to_shape(&g, b_shape));
                }
                Op::Sub { a, b, a_shape, b_shape } => {
                    accumulate(&mut grads, *a, reduce_to_shape(&g, a_shape));
                    accumulate(&mut grads, *b, reduce_to_shape(&g.map(|v| -v), b_shape));
                }
                Op::Mul { a, b, a_val, b_val } => {
                    if matches!(a, Slot::Node(_)) {
                        accumulate(&mut grads, *a, ops::ew_grad_to(&g, Some(b_val), a_val.shape()));
                    }
                    if matches!(b, Slot::Node(_)) {
                        accumulate(&mut grads, *b, ops::ew_grad_to(&g, Some(a_val), b_val.shape()));
                    }
                }
                Op::Scale { a, c } => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|v| v * c));
                }
                Op::Abs { a, a_val } => {
                    let sign = a_val.map(|v| {
                        if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *a, ops::ew_grad_to(&g, Some(&sign), a_val.shape()));
                }
                Op::LeakyRelu { a, a_val, slope } => {
                    let slope = *slope;
                    let local = a_val.map(|v| if v >= T::zero() { T::one() } else { slope });
                    accumulate(&mut grads, *a, ops::ew_grad_to(&g, Some(&local), a_val.shape()));
                }
                Op::SumAll { a, a_shape } => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(a_shape, gv));
                }
                Op::Matmul { a, b, a_val, b_val } => {
                    let (da, db) = ops::matmul_batched_grads(a_val, b_val, &g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::TransposeLast2 { a } => {
                    accumulate(&mut grads, *a, ops::transpose_last2(&g)?);
                }
                Op::SoftmaxLast { a, y } => {
                    accumulate(&mut grads, *a, ops::softmax_lastdim_grad(y, &g));
                }
                Op::Conv2d { x, k, b, x_val, k_val, dilation } => {
                    let (dx, dk, db) = ops::conv2d_grads(x_val, k_val, &g, *dilation);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *b, db);
                }
                Op::PixelShuffle { a, s } => {
                    accumulate(&mut grads, *a, ops::space_to_depth(&g, *s)?);
                }
                Op::ConcatLast { slots, widths } => {
                    for (slot, part) in slots.iter().zip(ops::split_lastdim(&g, widths)) {
                        accumulate(&mut grads, *slot, part);
                    }
                }
                Op::Slice { a, a_shape, start } => {
                    accumulate(&mut grads, *a, ops::unslice(&g, a_shape, start));
                }
                Op::Reshape { a, a_shape } => {
                    accumulate(&mut grads, *a, g.reshape(a_shape)?);
                }
            }
        }
        // leaf gradients must survive the sweep; re-seed nothing, just return
        let mut by_node = grads;
        by_node[root_id] = Some(Tensor::scalar(T::one()));
        Ok(Gradients { by_node })
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], slot: Slot, g: Tensor<T>) {
    let Slot::Node(id) = slot else { return };
    match &mut grads[id] {
        Some(existing) => {
            let summed = ops::ew_binary("grad_accumulate", existing, &g, |x, y| x + y)
                .expect("gradient shapes agree by construction");
            *existing = summed;
        }
        none => *none = Some(g),
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    fn slot(&self) -> Slot {
        match self.node {
            Some(id) => Slot::Node(id),
            None => Slot::Constant,
        }
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    fn emit(&self, value: Tensor<T>, tracked: bool, op: Op<T>) -> Result<Var<'t, T>, TensorError> {
        let node = self.tape.record(tracked, op);
        Ok(Var { tape: self.tape, value, node })
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(other);
        let value = ops::ew_binary("add", &self.value, &other.value, |x, y| x + y)?;
        check_finite("add", &value)?;
        self.emit(
            value,
            self.node.is_some() || other.node.is_some(),
            Op::Add {
                a: self.slot(),
                b: other.slot(),
                a_shape: self.value.shape().to_vec(),
                b_shape: other.value.shape().to_vec(),
            },
        )
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(other);
        let value = ops::ew_binary("sub", &self.value, &other.value, |x, y| x - y)?;
        check_finite("sub", &value)?;
        self.emit(
            value,
            self.node.is_some() || other.node.is_some(),
            Op::Sub {
                a: self.slot(),
                b: other.slot(),
                a_shape: self.value.shape().to_vec(),
                b_shape: other.value.shape().to_vec(),
            },
        )
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(other);
        // validate broadcastability up front so the error names the op
        broadcast_shape(self.value.shape(), other.value.shape(), "mul")?;
        let value = ops::ew_binary("mul", &self.value, &other.value, |x, y| x * y)?;
        check_finite("mul", &value)?;
        self.emit(
            value,
            self.node.is_some() || other.node.is_some(),
            Op::Mul {
                a: self.slot(),
                b: other.slot(),
                a_val: self.value.clone(),
                b_val: other.value.clone(),
            },
        )
    }

    pub fn scale(&self, c: T) -> Result<Var<'t, T>, TensorError> {
        let value = self.value.map(|v| v * c);
        check_finite("scale", &value)?;
        self.emit(value, self.node.is_some(), Op::Scale { a: self.slot(), c })
    }

    pub fn abs(&self) -> Result<Var<'t, T>, TensorError> {
        let value = self.value.map(|v| v.abs());
        self.emit(value, self.node.is_some(), Op::Abs { a: self.slot(), a_val: self.value.clone() })
    }

    /// max(x, 0) + slope · min(x, 0); the subgradient at 0 takes the
    /// negative-slope branch only for exact negatives, x = 0 maps to slope 1.
    pub fn leaky_relu(&self, slope: T) -> Result<Var<'t, T>, TensorError> {
        let value = self.value.map(|v| if v >= T::zero() { v } else { v * slope });
        self.emit(
            value,
            self.node.is_some(),
            Op::LeakyRelu { a: self.slot(), a_val: self.value.clone(), slope },
        )
    }

    pub fn sum_all(&self) -> Result<Var<'t, T>, TensorError> {
        let value = ops::sum_all(&self.value);
        check_finite("sum_all", &value)?;
        self.emit(
            value,
            self.node.is_some(),
            Op::SumAll { a: self.slot(), a_shape: self.value.shape().to_vec() },
        )
    }

    pub fn mean_all(&self) -> Result<Var<'t, T>, TensorError> {
        let n = self.value.numel();
        if n == 0 {
            return Err(TensorError::InvalidArg { op: "mean_all", msg: "empty tensor".into() });
        }
        self.sum_all()?.scale(T::one() / T::of(n as f64))
    }

    pub fn matmul_batched(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(other);
        let value = ops::matmul_batched(&self.value, &other.value)?;
        check_finite("matmul_batched", &value)?;
        self.emit(
            value,
            self.node.is_some() || other.node.is_some(),
            Op::Matmul {
                a: self.slot(),
                b: other.slot(),
                a_val: self.value.clone(),
                b_val: other.value.clone(),
            },
        )
    }

    pub fn transpose_last2(&self) -> Result<Var<'t, T>, TensorError> {
        let value = ops::transpose_last2(&self.value)?;
        self.emit(value, self.node.is_some(), Op::TransposeLast2 { a: self.slot() })
    }

    pub fn softmax_lastdim(&self) -> Result<Var<'t, T>, TensorError> {
        let value = ops::softmax_lastdim(&self.value)?;
        self.emit(
            value.clone(),
            self.node.is_some(),
            Op::SoftmaxLast { a: self.slot(), y: value },
        )
    }

    pub fn conv2d(
        &self,
        kernel: &Var<'t, T>,
        bias: &Var<'t, T>,
        dilation: usize,
    ) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(kernel);
        self.same_tape(bias);
        let value = ops::conv2d(&self.value, &kernel.value, &bias.value, dilation)?;
        check_finite("conv2d", &value)?;
        self.emit(
            value,
            self.node.is_some() || kernel.node.is_some() || bias.node.is_some(),
            Op::Conv2d {
                x: self.slot(),
                k: kernel.slot(),
                b: bias.slot(),
                x_val: self.value.clone(),
                k_val: kernel.value.clone(),
                dilation,
            },
        )
    }

    pub fn pixel_shuffle(&self, s: usize) -> Result<Var<'t, T>, TensorError> {
        let value = ops::pixel_shuffle(&self.value, s)?;
        self.emit(value, self.node.is_some(), Op::PixelShuffle { a: self.slot(), s })
    }

    pub fn slice(&self, start: &[usize], size: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let value = ops::slice(&self.value, start, size)?;
        self.emit(
            value,
            self.node.is_some(),
            Op::Slice { a: self.slot(), a_shape: self.value.shape().to_vec(), start: start.to_vec() },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let value = self.value.reshape(shape)?;
        self.emit(
            value,
            self.node.is_some(),
            Op::Reshape { a: self.slot(), a_shape: self.value.shape().to_vec() },
        )
    }
}

/// Concatenate along the last dimension, tracking every tracked operand.
pub fn concat_lastdim<'t, T: Scalar>(parts: &[&Var<'t, T>]) -> Result<Var<'t, T>, TensorError> {
    if parts.is_empty() {
        return Err(TensorError::InvalidArg { op: "concat_lastdim", msg: "no operands".into() });
    }
    let tape = parts[0].tape;
    let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| &p.value).collect();
    let value = ops::concat_lastdim(&tensors)?;
    let tracked = parts.iter().any(|p| p.node.is_some());
    let widths: Vec<usize> = parts.iter().map(|p| *p.value.shape().last().unwrap()).collect();
    let slots: Vec<Slot> = parts.iter().map(|p| p.slot()).collect();
    let node = tape.record(tracked, Op::ConcatLast { slots, widths });
    Ok(Var { tape, value, node })
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(), TensorError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

// ── Finite-difference verification ───────────────────────────────────

/// Worst-coordinate comparison between analytic and central-difference
/// gradients of a scalar-valued function.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compares the tape gradient of `f` against central differences in the
/// scalar type's own precision. `f` must be deterministic and return a
/// scalar. Relative error uses max(|analytic|, |numeric|, 1e-4) as the
/// denominator: coordinates whose exact gradient is zero (softmax shift
/// invariance produces them structurally) then compare against an
/// absolute tolerance sized for central-difference cancellation noise.
pub fn finite_diff_check<T, F>(
    f: &F,
    inputs: &[Tensor<T>],
    step: f64,
) -> Result<FdReport, TensorError>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, T>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&tape, &vars)?;
    if !y.value().is_scalar() {
        return Err(TensorError::BadShape {
            op: "finite_diff_check",
            expected: "scalar output".into(),
            got: y.value().shape().to_vec(),
        });
    }
    let grads = tape.backward(&y)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .map(|v| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64, TensorError> {
        let t = Tape::no_grad();
        let vs: Vec<Var<'_, T>> = perturbed.iter().map(|p| t.constant(p.clone())).collect();
        Ok(f(&t, &vs)?.value().data()[0].to_f64())
    };

    let h = T::of(step);
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (ai, input) in inputs.iter().enumerate() {
        for c in 0..input.numel() {
            let orig = input.data()[c];
            work[ai].data_mut()[c] = orig + h;
            let fp = eval(&work)?;
            work[ai].data_mut()[c] = orig - h;
            let fm = eval(&work)?;
            work[ai].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[ai].data()[c].to_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = ai;
                report.worst_coord = c;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
