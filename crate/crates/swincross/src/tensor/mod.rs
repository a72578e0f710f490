//! Dense row-major tensors with reverse-mode differentiation.
//!
//! Every operator is a pure function of its inputs and runs single-threaded
//! with a fixed reduction order, so identical inputs always produce bitwise
//! identical outputs. Tensors are immutable once created; only leaf tensors
//! (parameters) expose in-place updates, which are applied between forward
//! passes. Two element types are supported: `F32` for runtime and `F64` for
//! finite-difference gradient checks.

mod autograd;
pub(crate) mod kernels;
mod ops;

pub mod grad_check;

pub(crate) use autograd::Op;
pub(crate) use kernels as kern;

use std::cell::Cell;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

/// Element precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64` only.
pub trait Element:
    Copy
    + PartialOrd
    + std::fmt::Debug
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
    const DTYPE: DType;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    /// Views a storage of matching dtype; panics on drift (ops validate
    /// dtypes before dispatch).
    fn slice_of(s: &Storage) -> &[Self];
    fn make_storage(v: Vec<Self>) -> Storage;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: DType = DType::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn slice_of(s: &Storage) -> &[Self] {
        match s {
            Storage::F32(v) => v,
            Storage::F64(_) => panic!("expected f32 storage"),
        }
    }
    fn make_storage(v: Vec<Self>) -> Storage {
        Storage::F32(v)
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: DType = DType::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn slice_of(s: &Storage) -> &[Self] {
        match s {
            Storage::F64(v) => v,
            Storage::F32(_) => panic!("expected f64 storage"),
        }
    }
    fn make_storage(v: Vec<Self>) -> Storage {
        Storage::F64(v)
    }
}

/// Flat row-major element buffer.
#[derive(Debug, Clone)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Storage {
    pub fn zeros(dtype: DType, len: usize) -> Storage {
        match dtype {
            DType::F32 => Storage::F32(vec![0.0; len]),
            DType::F64 => Storage::F64(vec![0.0; len]),
        }
    }

    pub fn full(dtype: DType, len: usize, value: f64) -> Storage {
        match dtype {
            DType::F32 => Storage::F32(vec![value as f32; len]),
            DType::F64 => Storage::F64(vec![value; len]),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }

    pub(crate) fn accumulate(&mut self, other: &Storage) {
        match (self, other) {
            (Storage::F32(a), Storage::F32(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            (Storage::F64(a), Storage::F64(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            _ => unreachable!("gradient dtype drift"),
        }
    }

    pub(crate) fn get_f64(&self, idx: usize) -> f64 {
        match self {
            Storage::F32(v) => v[idx] as f64,
            Storage::F64(v) => v[idx],
        }
    }

    pub(crate) fn set_f64(&mut self, idx: usize, value: f64) {
        match self {
            Storage::F32(v) => v[idx] = value as f32,
            Storage::F64(v) => v[idx] = value,
        }
    }
}

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static MADD_COUNT: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Disables graph recording for the current thread while alive.
/// Forward passes under the guard keep no references to intermediates.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(false));
        NoGradGuard { prev }
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|c| c.set(prev));
    }
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` while counting multiply-add operations performed by matrix
/// multiplications (including those inside convolutions) on this thread.
pub fn with_madd_count<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = MADD_COUNT.with(|c| c.replace(Some(0)));
    let out = f();
    let count = MADD_COUNT.with(|c| c.replace(prev)).unwrap_or(0);
    (out, count)
}

pub(crate) fn record_madds(count: u64) {
    MADD_COUNT.with(|c| {
        if let Some(current) = c.get() {
            c.set(Some(current + count));
        }
    });
}

pub(crate) struct TensorInner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) dtype: DType,
    pub(crate) data: RwLock<Storage>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Mutex<Option<Storage>>,
    pub(crate) op: Option<Op>,
    pub(crate) backward_done: AtomicBool,
}

/// Handle to an immutable n-dimensional array. Cloning is cheap and shares
/// the underlying buffer.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Arc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("dtype", &self.inner.dtype)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

impl Tensor {
    pub(crate) fn from_parts(
        shape: Vec<usize>,
        data: Storage,
        requires_grad: bool,
        op: Option<Op>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let dtype = data.dtype();
        Tensor {
            inner: Arc::new(TensorInner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                dtype,
                data: RwLock::new(data),
                requires_grad,
                grad: Mutex::new(None),
                op,
                backward_done: AtomicBool::new(false),
            }),
        }
    }

    /// Builds a constant leaf (no gradient).
    pub fn from_storage(shape: &[usize], data: Storage) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "from_storage",
                format!("shape {:?} needs {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Tensor::from_parts(shape.to_vec(), data, false, None))
    }

    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        Tensor::from_storage(shape, Storage::F32(data))
    }

    pub fn from_f64(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_storage(shape, Storage::F64(data))
    }

    /// Builds a differentiable leaf; `backward` deposits gradients here.
    pub fn leaf(shape: &[usize], data: Storage) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "leaf",
                format!("shape {:?} needs {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Tensor::from_parts(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        Tensor::from_parts(shape.to_vec(), Storage::zeros(dtype, numel(shape)), false, None)
    }

    pub fn full(shape: &[usize], dtype: DType, value: f64) -> Tensor {
        Tensor::from_parts(
            shape.to_vec(),
            Storage::full(dtype, numel(shape), value),
            false,
            None,
        )
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Tensor {
        Tensor::full(shape, dtype, 1.0)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn dims(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn read_data(&self) -> RwLockReadGuard<'_, Storage> {
        self.inner.data.read().expect("tensor storage poisoned")
    }

    /// Copy of the raw buffer widened to `f64`.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.read_data().to_f64_vec()
    }

    /// Copy of the raw buffer narrowed to `f32`.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &*self.read_data() {
            Storage::F32(v) => v.clone(),
            Storage::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn storage_clone(&self) -> Storage {
        self.read_data().clone()
    }

    /// Scalar value of a single-element tensor.
    pub fn scalar_f64(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss { elements: self.len() });
        }
        Ok(self.read_data().get_f64(0))
    }

    pub fn all_finite(&self) -> bool {
        self.read_data().all_finite()
    }

    /// Replaces the buffer of a leaf tensor. Shape and dtype must match.
    pub fn set_data(&self, data: Storage) -> Result<()> {
        if data.len() != self.len() {
            return Err(Error::invalid(
                "set_data",
                format!("expected {} elements, got {}", self.len(), data.len()),
            ));
        }
        if data.dtype() != self.dtype() {
            return Err(Error::DTypeMismatch {
                op: "set_data",
                lhs: self.dtype(),
                rhs: data.dtype(),
            });
        }
        *self.inner.data.write().expect("tensor storage poisoned") = data;
        Ok(())
    }

    /// Mutates the buffer in place (optimizer updates, FD nudges).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut Storage) -> R) -> R {
        let mut guard = self.inner.data.write().expect("tensor storage poisoned");
        f(&mut guard)
    }

    /// Clones the current gradient, if one has been populated.
    pub fn grad(&self) -> Option<Storage> {
        self.inner.grad.lock().expect("grad poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad poisoned") = None;
    }

    pub(crate) fn add_to_grad(&self, g: &Storage) {
        let mut guard = self.inner.grad.lock().expect("grad poisoned");
        match guard.as_mut() {
            Some(existing) => existing.accumulate(g),
            None => *guard = Some(g.clone()),
        }
    }

    /// Element access by multi-index, for tests and oracles.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let st = strides(&self.inner.shape);
        let flat: usize = index
            .iter()
            .zip(&st)
            .map(|(i, s)| {
                assert!(*i < usize::MAX);
                i * s
            })
            .sum();
        self.read_data().get_f64(flat)
    }
}

/// Named trainable tensor. Names are dot-separated paths and unique within
/// a model; enumeration order is construction order.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Parameter {
        Parameter {
            name: name.into(),
            tensor,
        }
    }
}
