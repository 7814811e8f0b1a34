//! Dense tensor engine with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the universal value type: a contiguous rank-1..4 array in
//! NCHW layout for feature maps, generic over [`Element`] (`f32` for the
//! inference and benchmark paths, `f64` for every gradient-check suite).
//!
//! Operations are pure functions. When any input participates in gradient
//! tracking, the output records its parents and a [`BackwardStep`]; the
//! resulting DAG is replayed in reverse topological order by
//! [`backward`]. Tensors created from non-tracked inputs carry no history,
//! so plain inference never retains intermediates.
//!
//! Double-backward is not supported: gradients are plain arrays, not graph
//! nodes.

mod backward;
pub mod gradcheck;
mod ops;

pub use backward::{backward, Gradients, Tape};
pub use ops::{batch_norm_eval, batch_norm_train, concat_channels, conv2d, linear};

use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Element precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Scalar element type. Implemented for `f32` and `f64` only.
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Default
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn is_nan(self) -> bool;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn is_nan(self) -> bool {
        f32::is_nan(self)
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn is_nan(self) -> bool {
        f64::is_nan(self)
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) struct Inner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    /// Leaf flag set by the caller; interior nodes are never `requires_grad`.
    requires_grad: bool,
    /// True when a backward pass must produce or propagate a gradient here.
    needs_grad: bool,
    pub(crate) parents: Vec<Tensor<T>>,
    pub(crate) step: Option<ops::BackwardStep<T>>,
}

/// Dense rank-1..4 tensor. Cheap to clone (shared storage); immutable once
/// built. Feature maps use (batch, channel, height, width) order.
pub struct Tensor<T: Element> {
    pub(crate) inner: Rc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

fn validate_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidShape {
            op,
            detail: format!("rank must be 1..=4, got {:?}", shape),
        });
    }
    for (axis, &extent) in shape.iter().enumerate() {
        if extent == 0 {
            return Err(Error::InvalidShape {
                op,
                detail: format!("axis {axis} has zero extent in {:?}", shape),
            });
        }
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::InvalidShape {
            op,
            detail: format!("shape {:?} implies {numel} elements, data has {len}", shape),
        });
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    /// Construct a leaf tensor that does not track gradients.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape("tensor", shape, data.len())?;
        Ok(Self::leaf_inner(shape.to_vec(), Rc::new(data), false))
    }

    /// Construct a leaf tensor that participates in backward passes.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape("tensor", shape, data.len())?;
        Ok(Self::leaf_inner(shape.to_vec(), Rc::new(data), true))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![T::ZERO; numel])
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![value; numel])
    }

    /// Standard-normal leaf tensor.
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Result<Self> {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel).map(|_| T::from_f64(rng.normal())).collect();
        Self::from_vec(shape, data)
    }

    fn leaf_inner(shape: Vec<usize>, data: Rc<Vec<T>>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                needs_grad: requires_grad,
                parents: Vec::new(),
                step: None,
            }),
        }
    }

    /// Output of a recorded operation. History is kept only when some parent
    /// tracks gradients; otherwise the result is a plain leaf.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        step: ops::BackwardStep<T>,
    ) -> Self {
        let needs = parents.iter().any(|p| p.inner.needs_grad);
        if !needs {
            return Self::leaf_inner(shape, Rc::new(data), false);
        }
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: Rc::new(data),
                requires_grad: false,
                needs_grad: true,
                parents,
                step: Some(step),
            }),
        }
    }

    /// View of the same storage with history and gradient tracking dropped.
    pub fn detached(&self) -> Self {
        Self::leaf_inner(self.inner.shape.clone(), Rc::clone(&self.inner.data), false)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.as_ref().clone()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    /// True for tensors with no recorded history.
    pub fn is_leaf(&self) -> bool {
        self.inner.step.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "item",
                detail: format!("expected 1 element, shape is {:?}", self.shape()),
            });
        }
        Ok(self.inner.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Summary statistics (count, min, max, mean, std) for diagnostics.
    pub fn stats(&self) -> TensorStats {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for v in self.inner.data.iter() {
            let x = v.to_f64();
            min = min.min(x);
            max = max.max(x);
            sum += x;
        }
        let n = self.numel() as f64;
        let mean = sum / n;
        let mut var = 0.0;
        for v in self.inner.data.iter() {
            let d = v.to_f64() - mean;
            var += d * d;
        }
        TensorStats { numel: self.numel(), min, max, mean, std: (var / n).sqrt() }
    }
}

/// Diagnostic summary of a tensor's values.
#[derive(Debug, Clone, Copy)]
pub struct TensorStats {
    pub numel: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl<T: Element> fmt::Display for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.stats();
        write!(
            f,
            "Tensor{:?}[{}] mean={:.6} std={:.6} min={:.6} max={:.6}",
            self.shape(),
            T::DTYPE.name(),
            s.mean,
            s.std,
            s.min,
            s.max
        )
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Flat index into a rank-4 tensor.
#[inline]
pub(crate) fn idx4(shape: &[usize], b: usize, c: usize, h: usize, w: usize) -> usize {
    ((b * shape[1] + c) * shape[2] + h) * shape[3] + w
}
