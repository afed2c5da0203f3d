//! Dense row-major tensors and the forward kernels used by the model.
//!
//! Storage is 32-bit; every kernel is generic over [`Scalar`] so the same
//! code runs in a 64-bit checking mode for gradient verification. Tensors
//! are immutable values once constructed and safe to share across threads.

mod check;
mod graph;

pub use check::{finite_diff_check, FdReport, FdSampling, WorstCoord};
pub use graph::{Gradients, Graph, NodeId};

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]: `f32` for storage, `f64` for checking mode.
pub trait Scalar:
    Copy
    + PartialEq
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn powf(self, e: Self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn powf(self, e: Self) -> Self {
                <$t>::powf(self, e)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn maximum(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Dense tensor: a dimension list and row-major data, with
/// `product(dims) == data.len()` always.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {:?} imply {} elements, got {}", dims, numel, data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims,
            data: vec![T::ZERO; numel],
        }
    }

    pub fn filled(dims: Vec<usize>, value: T) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; numel],
        }
    }

    /// Single-element tensor with dims `[1]`.
    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows".to_string()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The two dims of a rank-2 tensor, or a shape error naming `op`.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(
                op,
                format!("expected a rank-2 tensor, got dims {:?}", other),
            )),
        }
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> Result<T> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected a single-element tensor, got dims {:?}",
                self.dims
            )))
        }
    }

    /// Same data under new dims; element count must match.
    pub fn reshape(&self, dims: Vec<usize>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.dims, dims),
            ));
        }
        Ok(Tensor {
            dims,
            data: self.data.clone(),
        })
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.dims[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy element-wise conversion to another scalar type (via f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Accumulated in f64 regardless of element type, so long vectors do
    /// not lose the low bits that unit-norm guarantees depend on.
    pub fn euclidean_norm(&self) -> T {
        let mut acc = 0.0f64;
        for &v in &self.data {
            let v = v.to_f64();
            acc += v * v;
        }
        T::from_f64(acc.sqrt())
    }
}

// ── Forward kernels ─────────────────────────────────────────────────
//
// Pure functions shared by the inference path and the autodiff graph, so
// both produce bit-identical values.

/// Standard matrix product `a[m×k] · b[k×p]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, p) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dims disagree: {:?} x {:?}", a.dims(), b.dims()),
        ));
    }
    let mut out = vec![T::ZERO; m * p];
    let threads = crate::thread_cap().min(m.max(1));
    if threads > 1 && 2 * m * k * p >= 1 << 20 {
        let rows_per = m.div_ceil(threads);
        std::thread::scope(|scope| {
            for (chunk_idx, chunk) in out.chunks_mut(rows_per * p).enumerate() {
                let row0 = chunk_idx * rows_per;
                let a_data = a.data();
                let b_data = b.data();
                scope.spawn(move || {
                    matmul_rows(a_data, b_data, chunk, row0, k, p);
                });
            }
        });
    } else {
        matmul_rows(a.data(), b.data(), &mut out, 0, k, p);
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("matmul produced a non-finite value".into()));
    }
    Tensor::new(vec![m, p], out)
}

// Each output row is an independent accumulation, so the result is
// bit-identical for any thread count.
fn matmul_rows<T: Scalar>(a: &[T], b: &[T], out: &mut [T], row0: usize, k: usize, p: usize) {
    for (local_i, out_row) in out.chunks_mut(p).enumerate() {
        let i = row0 + local_i;
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * p..(l + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_il * bv;
            }
        }
    }
}

pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2("transpose")?;
    let mut out = vec![T::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// Element-wise sum; dims must match exactly (no broadcasting).
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            "add",
            format!("dims {:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.dims().to_vec(), data)
}

/// Element-wise product; dims must match exactly.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            "mul",
            format!("dims {:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.dims().to_vec(), data)
}

/// Adds `bias[p]` to every row of `x[m×p]`. The only broadcast the kernel
/// set supports.
pub fn add_bias_rows<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, p) = x.dims2("add_bias_rows")?;
    if bias.dims() != [p] {
        return Err(Error::shape(
            "add_bias_rows",
            format!("bias dims {:?} do not match row width {}", bias.dims(), p),
        ));
    }
    let mut data = Vec::with_capacity(m * p);
    for i in 0..m {
        for (j, &b) in bias.data().iter().enumerate() {
            data.push(x.data()[i * p + j] + b);
        }
    }
    Tensor::new(vec![m, p], data)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > T::ZERO { v } else { T::ZERO })
        .collect();
    Tensor {
        dims: x.dims().to_vec(),
        data,
    }
}

pub fn exp<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let data: Vec<T> = x.data().iter().map(|&v| v.exp()).collect();
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("exp overflowed".into()));
    }
    Tensor::new(x.dims().to_vec(), data)
}

pub fn ln<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.data().iter().any(|&v| v <= T::ZERO) {
        return Err(Error::NonFinite("ln requires strictly positive input".into()));
    }
    let data = x.data().iter().map(|&v| v.ln()).collect();
    Tensor::new(x.dims().to_vec(), data)
}

pub fn recip<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.data().iter().any(|&v| v == T::ZERO) {
        return Err(Error::NonFinite("reciprocal of zero".into()));
    }
    let data = x.data().iter().map(|&v| T::ONE / v).collect();
    Tensor::new(x.dims().to_vec(), data)
}

pub fn clamp_min<T: Scalar>(x: &Tensor<T>, floor: T) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.maximum(floor)).collect();
    Tensor {
        dims: x.dims().to_vec(),
        data,
    }
}

pub fn scale<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v * c).collect();
    Tensor {
        dims: x.dims().to_vec(),
        data,
    }
}

pub fn add_scalar<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v + c).collect();
    Tensor {
        dims: x.dims().to_vec(),
        data,
    }
}

/// Sum of all entries, as a `[1]` tensor.
pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::ZERO;
    for &v in x.data() {
        acc += v;
    }
    Tensor::scalar(acc)
}

/// Row-wise normalization of `x[m×n]` to zero mean and unit variance over the
/// `n` entries of each row, then `gamma ⊙ x̂ + beta`. Variance is the biased
/// (1/n) estimate; `eps` stabilizes constant rows.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (m, n) = x.dims2("layer_norm")?;
    if n == 0 {
        return Err(Error::shape("layer_norm", "rows have zero width".to_string()));
    }
    if gamma.dims() != [n] || beta.dims() != [n] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?} do not match row width {}",
                gamma.dims(),
                beta.dims(),
                n
            ),
        ));
    }
    if !(eps > T::ZERO) {
        return Err(Error::Param(format!("layer_norm eps must be > 0, got {}", eps)));
    }
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_n;
        let mut var = T::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let inv_std = T::ONE / (var + eps).sqrt();
        for j in 0..n {
            let xh = (row[j] - mean) * inv_std;
            data.push(gamma.data()[j] * xh + beta.data()[j]);
        }
    }
    Tensor::new(vec![m, n], data)
}

/// Scales the whole tensor (viewed as one flat vector) to unit Euclidean
/// norm. Errors on zero input, where no unit direction exists.
pub fn l2_normalize<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let norm = x.euclidean_norm();
    if !(norm > T::ZERO) || !norm.is_finite() {
        return Err(Error::Contract(format!(
            "l2_normalize requires a nonzero finite input (norm = {})",
            norm
        )));
    }
    let inv = T::ONE / norm;
    Ok(scale(x, inv))
}

/// Stacks rank-1 tensors of equal length into a `[len(parts) × k]` matrix.
pub fn stack_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("stack_rows on empty list".into()))?;
    if first.rank() != 1 {
        return Err(Error::shape(
            "stack_rows",
            format!("parts must be rank-1, got {:?}", first.dims()),
        ));
    }
    let k = first.numel();
    let mut data = Vec::with_capacity(parts.len() * k);
    for part in parts {
        if part.dims() != [k] {
            return Err(Error::shape(
                "stack_rows",
                format!("part dims {:?} do not match [{}]", part.dims(), k),
            ));
        }
        data.extend_from_slice(part.data());
    }
    Tensor::new(vec![parts.len(), k], data)
}
