//! Dense 4-D tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an (n, c, h, w) array of `f64` values. Operations that
//! consume tracked tensors record a node on an implicit tape (the chain of
//! parent references); [`Tensor::backward`] replays that tape in reverse
//! topological order, visiting each node exactly once, and accumulates
//! gradients into every tracked leaf. Gradients accumulate across calls
//! until [`Tensor::zero_grad`] is invoked, mirroring the usual
//! training-loop semantics.
//!
//! Every public operation validates that its output is finite; NaN or Inf
//! is surfaced as [`Error::NonFinite`](crate::error::Error::NonFinite)
//! instead of propagating silently.

mod ops;

pub use ops::{
    abs, activation, add, affine, avg_down2, concat_channels, conv2d, gram, mean_all, mul,
    nearest_up2, resample, slice_sample, sub, sum_all, ActKind, ResampleMode,
};

use crate::error::{Error, Result};
use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Extents of a tensor in (batch, channels, height, width) order.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major offset of element (n, c, y, x).
    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    /// The scalar shape 1×1×1×1.
    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

struct Inner {
    id: u64,
    shape: Shape,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A dense 4-D array of `f64` with optional gradient tracking.
///
/// Cloning is cheap (reference-counted handle). One tape — the graph grown
/// from a set of tracked leaves — is single-owner; distinct tapes may be
/// used from distinct threads.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={}, tracked={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

impl Tensor {
    fn build(
        shape: Shape,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.len(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// An untracked tensor holding `data`.
    pub fn constant(shape: Shape, data: Vec<f64>) -> Result<Tensor> {
        if shape.len() != data.len() {
            return Err(Error::Shape {
                op: "constant",
                detail: format!("shape {} needs {} values, got {}", shape, shape.len(), data.len()),
            });
        }
        check_finite("constant", &data)?;
        Ok(Tensor::build(shape, data, false, Vec::new(), None))
    }

    /// A tracked leaf (parameter). Gradients accumulate here on backward.
    pub fn param(shape: Shape, data: Vec<f64>) -> Result<Tensor> {
        if shape.len() != data.len() {
            return Err(Error::Shape {
                op: "param",
                detail: format!("shape {} needs {} values, got {}", shape, shape.len(), data.len()),
            });
        }
        check_finite("param", &data)?;
        Ok(Tensor::build(shape, data, true, Vec::new(), None))
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::build(shape, vec![0.0; shape.len()], false, Vec::new(), None)
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Tensor> {
        Tensor::constant(shape, vec![value; shape.len()])
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Tensor::constant(Shape::scalar(), vec![value])
    }

    /// Result of an op: tracked iff any parent is tracked. Untracked
    /// results drop their parents so pure evaluation builds no tape.
    pub(crate) fn from_op(
        op: &str,
        shape: Shape,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        check_finite(op, &data)?;
        let tracked = parents.iter().any(|p| p.inner.requires_grad);
        if tracked {
            Ok(Tensor::build(shape, data, true, parents, Some(backward)))
        } else {
            Ok(Tensor::build(shape, data, false, Vec::new(), None))
        }
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn len(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    /// Copy of the underlying values.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let i = self.inner.shape.idx(n, c, y, x);
        self.inner.data.borrow()[i]
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Overwrite the values in place. Only meaningful on leaves; callers
    /// own the tape and must not mutate tensors a live graph depends on.
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Shape {
                op: "set_values",
                detail: format!("expected {} values, got {}", self.len(), values.len()),
            });
        }
        check_finite("set_values", values)?;
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// An untracked copy sharing no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::build(
            self.inner.shape,
            self.inner.data.borrow().clone(),
            false,
            Vec::new(),
            None,
        )
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => {
                *slot = Some(delta.to_vec());
            }
        }
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// tracked leaf reachable from this node. Repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Autograd(format!(
                "backward requires a scalar loss, got shape {}",
                self.inner.shape
            )));
        }
        if !self.inner.requires_grad {
            return Err(Error::Autograd(
                "backward through an untracked tensor".to_string(),
            ));
        }
        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            if let Some(f) = &node.inner.backward {
                let grad_out = match node.inner.grad.borrow().as_ref() {
                    Some(g) => g.clone(),
                    // Unreachable along any grad path that feeds the loss.
                    None => continue,
                };
                f(&grad_out, &node.inner.parents);
            }
        }
        Ok(())
    }

    /// Post-order over tracked ancestors; reversing yields a valid
    /// root-first schedule that touches each node once.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (node, expanded) explicit DFS stack.
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.inner.id) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.inner.parents {
                if p.inner.requires_grad && !visited.contains(&p.inner.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// Max relative disagreement between analytic and central-difference
/// gradients of `f` over every coordinate of `params`.
///
/// `f` must be a deterministic scalar function of the parameter values; it
/// is re-evaluated with each coordinate perturbed by ±`eps` in place.
/// The returned error is `max |analytic - fd| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    for p in params {
        if !p.requires_grad() {
            return Err(Error::Autograd(
                "finite_diff_check on untracked parameter".to_string(),
            ));
        }
        p.zero_grad();
    }
    let loss = f()?;
    if loss.len() != 1 {
        return Err(Error::Autograd(
            "finite_diff_check requires a scalar function".to_string(),
        ));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut max_err: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.len() {
            let x0 = p.data()[i];
            p.data_mut()[i] = x0 + eps;
            let f_plus = f()?.item();
            p.data_mut()[i] = x0 - eps;
            let f_minus = f()?.item();
            p.data_mut()[i] = x0;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite {
                    op: "finite_diff_check probe".to_string(),
                });
            }
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[pi][i];
            let err = (a - fd).abs() / a.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    for p in params {
        p.zero_grad();
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(3.5).unwrap();
        assert_eq!(t.item(), 3.5);
        assert_eq!(t.shape(), Shape::scalar());
    }

    #[test]
    fn constant_rejects_nan() {
        let err = Tensor::constant(Shape::new(1, 1, 1, 2), vec![1.0, f64::NAN]);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn constant_rejects_bad_length() {
        let err = Tensor::constant(Shape::new(1, 1, 2, 2), vec![1.0]);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_on_nonscalar_fails() {
        let x = Tensor::param(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let y = affine(&x, 2.0, 0.0).unwrap();
        assert!(matches!(y.backward(), Err(Error::Autograd(_))));
    }

    #[test]
    fn backward_through_untracked_fails() {
        let x = Tensor::scalar(1.0).unwrap();
        assert!(matches!(x.backward(), Err(Error::Autograd(_))));
    }

    #[test]
    fn grad_of_linear_map_is_constant() {
        // loss = sum(2 x) => grad 2 everywhere.
        let x = Tensor::param(Shape::new(1, 1, 2, 2), vec![0.3, -1.0, 4.0, 2.5]).unwrap();
        let loss = sum_all(&affine(&x, 2.0, 0.0).unwrap()).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 4]);
    }

    #[test]
    fn grad_of_square() {
        // loss = sum(x ⊙ x) at x=[3] => grad 6.
        let x = Tensor::param(Shape::scalar(), vec![3.0]).unwrap();
        let loss = sum_all(&mul(&x, &x).unwrap()).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn shared_node_visited_once() {
        // r used twice: grad must be 2·relu'(x), not 4.
        let x = Tensor::param(Shape::scalar(), vec![1.5]).unwrap();
        let r = activation(ActKind::Relu, &x).unwrap();
        let loss = sum_all(&add(&r, &r).unwrap()).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let x = Tensor::param(Shape::scalar(), vec![2.0]).unwrap();
        for _ in 0..2 {
            let loss = sum_all(&mul(&x, &x).unwrap()).unwrap();
            loss.backward().unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn finite_diff_on_square_is_tight() {
        let x = Tensor::param(Shape::scalar(), vec![1.0]).unwrap();
        let check = finite_diff_check(|| sum_all(&mul(&x, &x).unwrap()), &[x.clone()], 1e-6);
        assert!(check.unwrap() < 1e-8);
    }

    #[test]
    fn finite_diff_on_linear_is_rounding_level() {
        let x = Tensor::param(Shape::new(1, 1, 1, 3), vec![0.2, -0.7, 1.1]).unwrap();
        let check = finite_diff_check(|| sum_all(&affine(&x, 3.0, 1.0).unwrap()), &[x.clone()], 1e-6);
        assert!(check.unwrap() < 1e-9);
    }
}
