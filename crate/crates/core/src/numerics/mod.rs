//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Everything downstream (the encoder, the training pipelines, the probes)
//! builds on three pieces defined here:
//!
//! - [`Tensor`]: a flat row-major array with a shape and an optional gradient
//!   buffer, generic over [`Real`] so the same code runs in 32-bit for
//!   training and 64-bit for gradient checks.
//! - [`Tape`]: a record of primitive operations in execution order, replayed
//!   in reverse to accumulate gradients.
//! - [`finite_diff_check`]: the central-difference oracle every primitive's
//!   backward rule is verified against.

mod check;
mod tape;

pub use check::finite_diff_check;
pub use tape::{NodeId, Tape, ZERO_ROW};

use crate::error::{Error, Result};

/// Scalar element type: `f32` for training, `f64` for gradient checks.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Width in bits, used by the checkpoint format header.
    const BITS: u8;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Exact error function (not the tanh approximation).
    fn erf(self) -> Self;

    fn write_le(self, buf: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const BITS: u8 = 32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn erf(self) -> Self {
        // Evaluate in f64: libm's erf is accurate to the last f64 bit, so the
        // rounding to f32 is the only loss.
        libm::erf(self as f64) as f32
    }

    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes for f32"))
    }
}

impl Real for f64 {
    const BITS: u8 = 64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes for f64"))
    }
}

/// A dense row-major tensor. Scalars have shape `[1]`, vectors `[n]`,
/// matrices `[rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                primitive: "tensor",
                detail: format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value; panics on non-scalars (callers check first).
    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows/cols under the 2-D interpretation: `[n]` counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated to zeros on first use. Same length as data.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn clear_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn has_nonzero_grad(&self) -> bool {
        self.grad
            .as_ref()
            .is_some_and(|g| g.iter().any(|v| *v != T::zero()))
    }

    /// All data values finite?
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product `out += a @ b` with `a: [m,k]`, `b: [k,n]`.
pub(crate) fn mm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a @ b^T` with `a: [m,k]`, `b: [n,k]`.
pub(crate) fn mm_tb_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += a^T @ b` with `a: [m,k]`, `b: [m,n]`, out `[k,n]`.
pub(crate) fn mm_at_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_shape_data_mismatch() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension { primitive: "tensor", .. }));
    }

    #[test]
    fn grad_buffer_matches_data_length() {
        let mut t = Tensor::<f32>::zeros(vec![3, 2]);
        assert!(t.grad().is_none());
        t.grad_mut()[5] = 1.0;
        assert_eq!(t.grad().unwrap().len(), t.numel());
        t.clear_grad();
        assert!(!t.has_nonzero_grad());
    }

    #[test]
    fn erf_matches_known_values() {
        // erf(1) = 0.8427007929497149 (tabulated).
        assert!((Real::erf(1.0f64) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert_eq!(Real::erf(0.0f64), 0.0);
        assert!((Real::erf(0.5f32) - 0.520_499_88f32).abs() < 1e-6);
    }

    #[test]
    fn matmul_kernels_agree() {
        // a: [2,3], b: [3,2]
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut out = [0.0f64; 4];
        mm_acc(&a, &b, &mut out, 2, 3, 2);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);

        // a @ b^T with b stored transposed should match.
        let b_t = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0]; // [2,3] rows are b's cols
        let mut out_tb = [0.0f64; 4];
        mm_tb_acc(&a, &b_t, &mut out_tb, 2, 3, 2);
        assert_eq!(out, out_tb);

        // a^T stored as-is via mm_at: (a^T)^T @ b == a @ b.
        let a_t = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0]; // [3,2]
        let mut out_at = [0.0f64; 4];
        mm_at_acc(&a_t, &b, &mut out_at, 3, 2, 2);
        assert_eq!(out, out_at);
    }
}
