use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use super::TensorError;

/// Real number type the engine computes in.
///
/// `f32` is used for training and inference, `f64` only for gradient checking.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn erf(self) -> Self;

    /// `c = a · b + beta · c` over strided buffers. Strides must be
    /// non-negative and every addressed element must lie inside its slice.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );
}

/// One past the largest offset touched by a `rows × cols` strided view.
fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    assert!(rs >= 0 && cs >= 0, "negative gemm stride");
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

fn check_gemm<T>(m: usize, k: usize, n: usize, a: &(&[T], isize, isize), b: &(&[T], isize, isize), c: &(&mut [T], isize, isize)) {
    assert!(a.0.len() >= extent(m, k, a.1, a.2), "gemm lhs out of bounds");
    assert!(b.0.len() >= extent(k, n, b.1, b.2), "gemm rhs out of bounds");
    assert!(c.0.len() >= extent(m, n, c.1, c.2), "gemm output out of bounds");
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[f32], isize, isize),
        b: (&[f32], isize, isize),
        beta: f32,
        c: (&mut [f32], isize, isize),
    ) {
        check_gemm(m, k, n, &a, &b, &c);
        // SAFETY: check_gemm bounds every strided access inside the slices.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                beta,
                c.0.as_mut_ptr(),
                c.1,
                c.2,
            );
        }
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[f64], isize, isize),
        b: (&[f64], isize, isize),
        beta: f64,
        c: (&mut [f64], isize, isize),
    ) {
        check_gemm(m, k, n, &a, &b, &c);
        // SAFETY: check_gemm bounds every strided access inside the slices.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                beta,
                c.0.as_mut_ptr(),
                c.1,
                c.2,
            );
        }
    }
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Contract(format!(
                "tensor dimensions must all be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Shape {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor dimensions must all be >= 1, got {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.to_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }
}

/// Plain (non-recorded) matrix product, used outside of the tape.
pub fn matmul_plain<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(TensorError::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, (&a.data, k as isize, 1), (&b.data, n as isize, 1), T::zero(), (&mut out, n as isize, 1));
    Tensor::new(&[m, n], out)
}
