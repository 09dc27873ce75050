//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Data is row-major. There is no general broadcasting: binary ops accept
//! equal shapes or a scalar operand, and the few broadcast patterns the
//! models need (bias rows, per-head column slices) are explicit ops with
//! their own backward rules. Gradients accumulate across uses; call
//! [`Tensor::zero_grad`] between steps.

mod format;
mod gradcheck;
mod tape;

pub use format::{decode_tensor, encode_tensor, read_tensor, write_tensor};
pub use gradcheck::{check_grad, check_grad_params};
pub use tape::{IndexMapPlan, Tape};

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
}

/// A dense tensor. Cloning is cheap (shared storage); values are treated as
/// immutable while a tape references them, with two sanctioned exceptions:
/// optimizer updates between steps and finite-difference perturbation in
/// tests, both via [`Tensor::set_data`] / [`Tensor::nudge`].
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if numel_of(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel_of(&shape), data.len()),
            });
        }
        Ok(Tensor::raw(shape, data, false))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel_of(&shape);
        Tensor::raw(shape, vec![0.0; n], false)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let n = numel_of(&shape);
        Tensor::raw(shape, vec![value; n], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::raw(vec![1], vec![value], false)
    }

    /// A leaf that participates in gradient computation.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
            }),
        }
    }

    /// Identity of this tensor on the tape.
    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// True when both handles refer to the same storage.
    pub fn same(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of {} elements", d.len());
        d[0]
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            let bad = self
                .inner
                .data
                .borrow()
                .iter()
                .copied()
                .find(|v| !v.is_finite())
                .unwrap_or(f64::NAN);
            Err(Error::DomainError {
                op,
                detail: format!("non-finite value {bad}"),
            })
        }
    }

    /// Overwrite the stored values. Only legal between tape lifetimes.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                detail: format!("expected {} values, got {}", self.numel(), values.len()),
            });
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Add `delta` to one coordinate (finite-difference probes).
    pub fn nudge(&self, index: usize, delta: f64) {
        self.inner.data.borrow_mut()[index] += delta;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }
}
