//! Dense N-D float tensors with reverse-mode differentiation.
//!
//! Tensors are immutable once written by the op that produced them; each op
//! output records its parents, forming the tape that [`Tensor::backward`]
//! walks. Leaf tensors created with [`Tensor::param`] (or marked via
//! [`Tensor::set_requires_grad`]) accumulate gradients into a persistent
//! per-tensor buffer; an explicit [`Tensor::zero_grad`] resets it, repeated
//! backward calls accumulate.
//!
//! Training and sampling run in `f32`; gradient-check tests instantiate the
//! same ops at `f64`.

mod adam;
mod backward;
mod gemm;
mod ops;
pub mod parallel;
mod serial;

pub use adam::AdamState;
pub use ops::concat_channels;
pub use serial::{read_tensor, write_tensor, PDT_MAGIC};

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Element type of a tensor: `f32` for training/sampling, `f64` for
/// precision-sensitive verification.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($ty:ty) => {
        impl Scalar for $ty {
            #[inline]
            fn zero() -> Self {
                0.0
            }
            #[inline]
            fn one() -> Self {
                1.0
            }
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $ty
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$ty>::exp(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$ty>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// The operation that produced a tensor, holding its parents. `Leaf` tensors
/// have no parents and terminate the backward walk.
#[derive(Debug)]
pub(crate) enum Op<E: Scalar> {
    Leaf,
    Add(Tensor<E>, Tensor<E>),
    Sub(Tensor<E>, Tensor<E>),
    Mul(Tensor<E>, Tensor<E>),
    Neg(Tensor<E>),
    Scale(Tensor<E>, E),
    AddScalar(Tensor<E>),
    Silu(Tensor<E>),
    Sum(Tensor<E>),
    Mean(Tensor<E>),
    Mse(Tensor<E>, Tensor<E>),
    Conv2d {
        input: Tensor<E>,
        kernel: Tensor<E>,
        stride: usize,
        padding: usize,
    },
    AddBias(Tensor<E>, Tensor<E>),
    Linear {
        input: Tensor<E>,
        weight: Tensor<E>,
        bias: Tensor<E>,
    },
    GroupNorm {
        input: Tensor<E>,
        gamma: Tensor<E>,
        beta: Tensor<E>,
        groups: usize,
        /// Per (batch, group): mean and 1/sqrt(var + eps) from the forward pass.
        stats: Vec<(E, E)>,
    },
    Upsample2x(Tensor<E>),
    AvgPool2x(Tensor<E>),
    ConcatChannels(Tensor<E>, Tensor<E>),
    SliceChannels {
        input: Tensor<E>,
        start: usize,
    },
}

impl<E: Scalar> Op<E> {
    fn parents(&self) -> Vec<&Tensor<E>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![a, b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Silu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Upsample2x(a)
            | Op::AvgPool2x(a) => vec![a],
            Op::Conv2d { input, kernel, .. } => vec![input, kernel],
            Op::AddBias(a, b) => vec![a, b],
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![input, weight, bias],
            Op::GroupNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::ConcatChannels(a, b) => vec![a, b],
            Op::SliceChannels { input, .. } => vec![input],
        }
    }
}

pub(crate) struct Inner<E: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<E>>>,
    op: Op<E>,
}

impl<E: Scalar> fmt::Debug for Inner<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

/// Dense N-D tensor. Cheap to clone (shared storage); images use
/// `[batch, channel, height, width]` layout.
#[derive(Debug, Clone)]
pub struct Tensor<E: Scalar = f32> {
    pub(crate) inner: Rc<Inner<E>>,
}

impl<E: Scalar> Tensor<E> {
    pub(crate) fn new(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Op<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Leaf tensor from raw data. Fails if the shape does not match the
    /// data length.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Trainable leaf tensor (gradients accumulate after backward).
    pub fn param(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let t = Tensor::from_vec(shape, data)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    /// Mark a leaf tensor as requiring gradients.
    pub fn set_requires_grad(self) -> Result<Self> {
        if !matches!(self.inner.op, Op::Leaf) {
            return Err(Error::contract(
                "requires_grad can only be set on leaf tensors",
            ));
        }
        self.inner.requires_grad.set(true);
        Ok(self)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![E::zero(); n], false, Op::Leaf)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            vec![E::from_f64(value); n],
            false,
            Op::Leaf,
        )
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![], vec![E::from_f64(value)], false, Op::Leaf)
    }

    /// Seeded standard-normal leaf tensor (one noise-tensor draw).
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut buf = vec![0.0f64; n];
        rng.fill_gauss_f64(&mut buf);
        let data = buf.into_iter().map(E::from_f64).collect();
        Tensor::new(shape.to_vec(), data, false, Op::Leaf)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor with {} elements",
                self.numel()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Overwrite the data of a leaf tensor in place (optimizer updates,
    /// checkpoint restore). Op outputs stay immutable.
    pub fn set_data(&self, values: &[E]) -> Result<()> {
        if !matches!(self.inner.op, Op::Leaf) {
            return Err(Error::contract("set_data on a non-leaf tensor"));
        }
        if values.len() != self.numel() {
            return Err(Error::contract(format!(
                "set_data length {} does not match {} elements",
                values.len(),
                self.numel()
            )));
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn with_data_mut<R>(&self, f: impl FnOnce(&mut [E]) -> R) -> R {
        f(&mut self.inner.data.borrow_mut())
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn op(&self) -> &Op<E> {
        &self.inner.op
    }

    /// Detached leaf copy sharing no graph history.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::new(
            self.inner.shape.clone(),
            self.to_vec(),
            false,
            Op::Leaf,
        )
    }

    /// Detached copy with every element clamped to `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<E> {
        let (lo, hi) = (E::from_f64(lo), E::from_f64(hi));
        let data = self
            .data()
            .iter()
            .map(|&v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            })
            .collect();
        Tensor::new(self.inner.shape.clone(), data, false, Op::Leaf)
    }

    /// Detached `ca * a + cb * b` (sampling-path algebra, outside the tape).
    pub fn affine_pair(a: &Tensor<E>, ca: f64, b: &Tensor<E>, cb: f64) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::contract(format!(
                "affine_pair shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (ca, cb) = (E::from_f64(ca), E::from_f64(cb));
        let bd = b.data();
        let data = a
            .data()
            .iter()
            .zip(bd.iter())
            .map(|(&x, &y)| ca * x + cb * y)
            .collect();
        Ok(Tensor::new(a.inner.shape.clone(), data, false, Op::Leaf))
    }

    /// Detached `scale * a + offset` elementwise.
    pub fn affine(&self, scale: f64, offset: f64) -> Tensor<E> {
        let (s, o) = (E::from_f64(scale), E::from_f64(offset));
        let data = self.data().iter().map(|&x| s * x + o).collect();
        Tensor::new(self.inner.shape.clone(), data, false, Op::Leaf)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Max |a - b| over all elements.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::contract(format!(
                "max_abs_diff shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let od = other.data();
        Ok(self
            .data()
            .iter()
            .zip(od.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Bitwise equality of shapes and payloads.
    pub fn bits_eq(&self, other: &Tensor<E>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data().iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    /// Interpret as a single image plane: shape must be `[H, W]` or
    /// `[1, ..., 1, H, W]`. Returns `(h, w, data)`.
    pub fn as_plane(&self) -> Result<(usize, usize, Vec<E>)> {
        let shape = self.shape();
        if shape.len() < 2 || shape[..shape.len() - 2].iter().product::<usize>() != 1 {
            return Err(Error::contract(format!(
                "expected a single [H, W] plane, got shape {:?}",
                shape
            )));
        }
        let h = shape[shape.len() - 2];
        let w = shape[shape.len() - 1];
        Ok((h, w, self.to_vec()))
    }
}

/// In debug builds, verify that an op with finite inputs produced a finite
/// output. Non-finite inputs are allowed to propagate (the training loop
/// handles those via the NaN-abort path).
pub(crate) fn debug_check_finite<E: Scalar>(out: &[E], inputs: &[&Tensor<E>]) {
    if cfg!(debug_assertions) && !out.iter().all(|v| v.is_finite()) {
        let inputs_finite = inputs.iter().all(|t| t.all_finite());
        assert!(
            !inputs_finite,
            "op produced non-finite values from finite inputs"
        );
    }
}
