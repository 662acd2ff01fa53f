//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Design points:
//! - Row-major contiguous storage, generic over [`Scalar`] (f32 for training,
//!   f64 for gradient verification). Random sampling always draws f64 and
//!   casts, so RNG streams are identical across precisions.
//! - A [`Tape`] records one forward pass; [`Tape::backward`] walks it in
//!   reverse, visiting each node exactly once. Ops record themselves only
//!   when some input requires gradients and the tape is recording.
//! - Every op validates shapes eagerly and checks outputs for NaN/Inf
//!   (the attention-mask op is the one sanctioned producer of -inf).
//! - No implicit broadcasting; trailing-dimension bias addition and gain
//!   scaling are explicit ops.

mod check;
mod io;
pub mod ops;
mod params;
mod tape;

pub use check::{grad_check, grad_check_named};
pub use io::{load_param_archive, params_checksum, save_param_archive, ArchiveError};
pub use ops::*;
pub use params::ParamSet;
pub use tape::Tape;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt::{Debug, Display};
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("unknown parameter: {0}")]
    UnknownParam(String),
    #[error("gradient for {0} is non-finite")]
    NonFiniteGrad(String),
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; build a fresh tape per step")]
    TapeConsumed,
    #[error("backward: loss is not tracked on this tape")]
    DetachedLoss,
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Element type of tensors: the arithmetic surface the numerics need, plus
/// exact f64 round-tripping for RNG casts and reporting.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Default
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn zero() -> Self;
    fn one() -> Self;
    fn neg_infinity() -> Self;
    fn is_finite_val(self) -> bool;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $name;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
            fn is_finite_val(self) -> bool {
                self.is_finite()
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
        }
    };
}

impl_scalar!(f32, "f32");
impl_scalar!(f64, "f64");

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    tape_id: Cell<Option<u64>>,
}

/// Shared handle to a dense array. Cloning is shallow; ops never mutate
/// existing storage, and parameter updates go through [`Tensor::data_mut`]
/// inside the optimizer's exclusive window.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self::raw(shape, data))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                tape_id: Cell::new(None),
            }),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::raw(shape, vec![T::zero(); numel])
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self::raw(shape, vec![value; numel])
    }

    pub fn scalar(value: T) -> Self {
        Self::raw(vec![], vec![value])
    }

    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Result<Self, TensorError> {
        Self::from_vec(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// Normal(0, std) truncated at two standard deviations; samples are drawn
    /// in f64 so the stream is identical for every element type.
    pub fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let dist = Normal::new(0.0f64, std).expect("std must be finite");
        let bound = 2.0 * std;
        let data = (0..numel)
            .map(|_| loop {
                let v = dist.sample(rng);
                if v.abs() <= bound {
                    break T::from_f64(v);
                }
            })
            .collect();
        Self::raw(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Direct mutable access to storage. Reserved for the optimizer's update
    /// window, parameter loading, and the finite-difference driver.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> Result<T, TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.inner.shape.clone()));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    /// Marks this tensor as a gradient leaf (parameter) and returns it.
    pub fn with_grad(self) -> Self {
        self.inner.requires_grad.set(true);
        self
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn accumulate_grad(&self, delta: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                assert_eq!(g.len(), delta.len(), "gradient length mismatch");
                for (gi, &di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn tape_id(&self) -> Option<u64> {
        self.inner.tape_id.get()
    }

    pub(crate) fn set_tape_id(&self, id: u64) {
        self.inner.tape_id.set(Some(id));
    }

    /// Value copy with no gradient history.
    pub fn detach(&self) -> Tensor<T> {
        Self::raw(self.inner.shape.clone(), self.to_vec())
    }

    /// Independent copy of a parameter, preserving leaf status.
    pub fn deep_clone(&self) -> Tensor<T> {
        let t = Self::raw(self.inner.shape.clone(), self.to_vec());
        t.set_requires_grad(self.requires_grad());
        t
    }

    pub fn ptr_eq(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Converts elementwise to another scalar type through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::from_f64(v.to_f64())).collect();
        let t = Tensor::<U>::raw(self.inner.shape.clone(), data);
        t.set_requires_grad(self.requires_grad());
        t
    }
}

pub(crate) fn ensure_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite_val()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}
