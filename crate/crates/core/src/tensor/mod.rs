//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Operations append nodes to a [`Tape`]; creation order is execution order,
//! so reverse iteration is exactly reverse-topological. Backward visits each
//! node once and accumulates gradients into every `requires_grad` leaf.
//!
//! The element type is generic: `f32` is the training default, `f64` is the
//! verification mode used by finite-difference checks.

pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod ops;
pub mod seq;

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

/// Scalar element of a tensor: `f32` (training) or `f64` (verification).
pub trait Element:
    num_traits::Float + num_traits::NumAssign + Copy + Send + Sync + std::fmt::Debug + 'static
{
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

pub(crate) struct Node<E: Element> {
    pub shape: Vec<usize>,
    pub value: Vec<E>,
    pub requires_grad: bool,
    pub op_name: &'static str,
    pub backward: Option<Box<dyn BackwardFn<E>>>,
}

/// Per-op backward rule. Reads input values from the tape, receives the
/// output gradient, and accumulates into the input gradient buffers.
pub(crate) trait BackwardFn<E: Element> {
    fn backward(&self, nodes: &[Node<E>], out_grad: &[E], sink: &mut GradSink<'_, E>);
}

/// Mutable view of the gradient buffers for nodes created before the one
/// being differentiated. Buffers allocate lazily; nodes that do not require
/// gradients return `None` so ops can skip the work.
pub(crate) struct GradSink<'a, E: Element> {
    grads: &'a mut [Option<Vec<E>>],
    nodes: &'a [Node<E>],
}

impl<'a, E: Element> GradSink<'a, E> {
    pub fn grad_mut(&mut self, id: usize) -> Option<&mut [E]> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let len = self.nodes[id].value.len();
        Some(self.grads[id].get_or_insert_with(|| vec![E::zero(); len]).as_mut_slice())
    }
}

struct TapeInner<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    backward_done: bool,
}

/// Recorded computation graph. Cloning is cheap (shared handle).
pub struct Tape<E: Element> {
    inner: Rc<RefCell<TapeInner<E>>>,
}

impl<E: Element> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tensor on a tape.
pub struct Tensor<E: Element> {
    tape: Tape<E>,
    id: usize,
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                backward_done: false,
            })),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// New leaf tensor. `requires_grad` marks it as a gradient target.
    pub fn leaf(&self, shape: &[usize], data: Vec<E>, requires_grad: bool) -> Result<Tensor<E>> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                what: "leaf",
                details: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        self.push(shape.to_vec(), data, requires_grad, "leaf", None)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&self, shape: &[usize], data: Vec<E>) -> Result<Tensor<E>> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&self, v: E) -> Result<Tensor<E>> {
        self.leaf(&[1], vec![v], false)
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<E>,
        requires_grad: bool,
        op_name: &'static str,
        backward: Option<Box<dyn BackwardFn<E>>>,
    ) -> Result<Tensor<E>> {
        if let Some(i) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("{op_name} (index {i})"),
            });
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op_name,
            backward: if requires_grad { backward } else { None },
        });
        Ok(Tensor {
            tape: self.clone(),
            id,
        })
    }

    pub(crate) fn same_tape(&self, other: &Tape<E>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Reverse-mode sweep from a scalar root. Errors on a non-scalar root,
    /// a detached (gradient-free) root, or a repeated backward call.
    pub fn backward(&self, root: &Tensor<E>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(Error::TapeUsage(
                "repeated backward on the same tape (build a fresh graph per step)".into(),
            ));
        }
        {
            let node = &inner.nodes[root.id];
            if node.value.len() != 1 {
                return Err(Error::TapeUsage(format!(
                    "backward root must be scalar, got shape {:?}",
                    node.shape
                )));
            }
            if !node.requires_grad {
                return Err(Error::TapeUsage(
                    "backward root is detached: no input requires gradients".into(),
                ));
            }
        }
        inner.backward_done = true;
        let n = inner.nodes.len();
        inner.grads.clear();
        inner.grads.resize(n, None);
        inner.grads[root.id] = Some(vec![E::one()]);

        let TapeInner { nodes, grads, .. } = &mut *inner;
        for i in (0..=root.id).rev() {
            if grads[i].is_none() {
                continue;
            }
            let Some(op) = nodes[i].backward.as_ref() else {
                continue;
            };
            let (lo, hi) = grads.split_at_mut(i);
            let g = hi[0].as_deref().expect("checked above");
            let mut sink = GradSink {
                grads: lo,
                nodes: &nodes[..i],
            };
            op.backward(nodes, g, &mut sink);
        }

        // Gradients must stay finite; a blow-up here names the producing op.
        for i in 0..=root.id {
            if let Some(g) = &grads[i] {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: format!("backward of {}", nodes[i].op_name),
                    });
                }
            }
        }
        Ok(())
    }
}

impl<E: Element> Tensor<E> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape<E> {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Vec<E> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    /// Run `f` against the forward value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&[E]) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn scalar_value(&self) -> E {
        let inner = self.tape.inner.borrow();
        let v = &inner.nodes[self.id].value;
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    /// Copy of the accumulated gradient, if any (populated by `backward`).
    pub fn grad(&self) -> Option<Vec<E>> {
        self.tape.inner.borrow().grads.get(self.id).and_then(|g| g.clone())
    }

    pub(crate) fn expect_same_tape(&self, other: &Tensor<E>) -> Result<()> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::TapeUsage(
                "operands belong to different tapes".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[4], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
        let s = x.sum().unwrap();
        assert_eq!(s.scalar_value(), 10.0);
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn square_sum_backward() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[1], vec![3.0], true).unwrap();
        let y = x.mul(&x).unwrap().sum().unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn repeated_backward_is_error() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[1], vec![2.0], true).unwrap();
        let y = x.mul(&x).unwrap();
        tape.backward(&y).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::TapeUsage(_))));
    }

    #[test]
    fn non_scalar_root_is_error() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(tape.backward(&x), Err(Error::TapeUsage(_))));
    }

    #[test]
    fn detached_root_is_error() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[1], vec![1.0]).unwrap();
        let y = x.exp().unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::TapeUsage(_))));
    }

    #[test]
    fn cross_tape_op_is_error() {
        let a_tape: Tape<f64> = Tape::new();
        let b_tape: Tape<f64> = Tape::new();
        let a = a_tape.leaf(&[1], vec![1.0], true).unwrap();
        let b = b_tape.leaf(&[1], vec![1.0], true).unwrap();
        assert!(matches!(a.add(&b), Err(Error::TapeUsage(_))));
    }

    #[test]
    fn nan_forward_is_diagnosed() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[1], vec![800.0], true).unwrap();
        // exp(800) overflows to +inf.
        match x.exp() {
            Err(Error::NonFinite { op }) => assert!(op.contains("exp")),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn gradient_accumulation_is_additive() {
        // backward(f + g) equals backward(f) + backward(g) on shared leaves.
        let data = vec![0.5, -1.5, 2.0];

        let grad_of = |parts: &[fn(&Tensor<f64>) -> Tensor<f64>]| -> Vec<f64> {
            let tape: Tape<f64> = Tape::new();
            let x = tape.leaf(&[3], data.clone(), true).unwrap();
            let mut total: Option<Tensor<f64>> = None;
            for p in parts {
                let term = p(&x);
                total = Some(match total {
                    None => term,
                    Some(t) => t.add(&term).unwrap(),
                });
            }
            let root = total.unwrap();
            tape.backward(&root).unwrap();
            x.grad().unwrap()
        };

        fn f(x: &Tensor<f64>) -> Tensor<f64> {
            x.mul(x).unwrap().sum().unwrap()
        }
        fn g(x: &Tensor<f64>) -> Tensor<f64> {
            x.exp().unwrap().sum().unwrap()
        }

        let gf = grad_of(&[f]);
        let gg = grad_of(&[g]);
        let gfg = grad_of(&[f, g]);
        for i in 0..3 {
            assert!((gfg[i] - (gf[i] + gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let tape: Tape<f32> = Tape::new();
            let x = tape.leaf(&[3], vec![0.1, 0.2, 0.3], true).unwrap();
            x.silu().unwrap().sum().unwrap().scalar_value()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
