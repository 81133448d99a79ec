use std::fmt;

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{shape_err, Result};

/// Floating-point element type of the kernel.
///
/// Training runs in `f32`; `f64` exists so gradient checks can run with a
/// finite-difference error floor well below the tolerances under test.
pub trait Scalar: Float + Default + Send + Sync + fmt::Debug + 'static {
    /// `c = alpha * a * b + beta * c` for strided matrices.
    ///
    /// # Safety
    /// All pointers must address matrices of the stated shape and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite cast")
    }

    fn as_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("finite cast")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Tensor2<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor2<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor2[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor2<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "tensor data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a tensor from equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor2<U> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Concatenates two tensors along columns.
    pub fn hcat(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(shape_err!(
                "cannot concatenate {} rows with {} rows",
                self.rows,
                other.rows
            ));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Self {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Copies out the column range `start..end`.
    pub fn columns(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.cols);
        let cols = end - start;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Self {
            rows: self.rows,
            cols,
            data,
        }
    }

    /// Squared Frobenius norm, accumulated in f64.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }
}

/// Strided read-only matrix view used by the GEMM helpers.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    rs: usize,
    cs: usize,
}

// Below this many multiply-adds the rayon split costs more than it saves.
const PAR_MIN_WORK: usize = 1 << 20;

/// `out[m x n] = a[m x k] * b[k x n]`, splitting output rows across the
/// current rayon pool. Every output element is produced by one kernel call
/// with a fixed reduction order, so results do not depend on thread count.
fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: View<'_, T>, b: View<'_, T>) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if m == 0 || n == 0 {
        return out;
    }
    let threads = rayon::current_num_threads();
    let run = |row0: usize, chunk: &mut [T]| {
        let rows = chunk.len() / n;
        let a_off = row0 * a.rs;
        // SAFETY: the views were constructed from slices that cover the
        // strided extents of the requested shapes; `chunk` is `rows x n`.
        unsafe {
            T::gemm_raw(
                rows,
                k,
                n,
                T::one(),
                a.data.as_ptr().add(a_off),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                T::zero(),
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if threads > 1 && m * k * n >= PAR_MIN_WORK && m >= 2 * threads {
        let rows_per = m.div_ceil(threads);
        out.par_chunks_mut(rows_per * n)
            .enumerate()
            .for_each(|(i, chunk)| run(i * rows_per, chunk));
    } else {
        run(0, &mut out);
    }
    out
}

/// `x [m x k] * w^T` where `w` is `[n x k]`.
pub(crate) fn matmul_nt<T: Scalar>(x: &Tensor2<T>, w: &Tensor2<T>) -> Tensor2<T> {
    debug_assert_eq!(x.cols, w.cols);
    let (m, k, n) = (x.rows, x.cols, w.rows);
    let data = gemm(
        m,
        k,
        n,
        View {
            data: &x.data,
            rs: k,
            cs: 1,
        },
        View {
            data: &w.data,
            rs: 1,
            cs: k,
        },
    );
    Tensor2 {
        rows: m,
        cols: n,
        data,
    }
}

/// `g [m x n] * w` where `w` is `[n x k]`.
pub(crate) fn matmul_nn<T: Scalar>(g: &Tensor2<T>, w: &Tensor2<T>) -> Tensor2<T> {
    debug_assert_eq!(g.cols, w.rows);
    let (m, k, n) = (g.rows, g.cols, w.cols);
    let data = gemm(
        m,
        k,
        n,
        View {
            data: &g.data,
            rs: k,
            cs: 1,
        },
        View {
            data: &w.data,
            rs: n,
            cs: 1,
        },
    );
    Tensor2 {
        rows: m,
        cols: n,
        data,
    }
}

/// `g^T x` where `g` is `[b x n]` and `x` is `[b x k]`; sums over the batch.
pub(crate) fn matmul_tn<T: Scalar>(g: &Tensor2<T>, x: &Tensor2<T>) -> Tensor2<T> {
    debug_assert_eq!(g.rows, x.rows);
    let (m, k, n) = (g.cols, g.rows, x.cols);
    let data = gemm(
        m,
        k,
        n,
        View {
            data: &g.data,
            rs: 1,
            cs: m,
        },
        View {
            data: &x.data,
            rs: n,
            cs: 1,
        },
    );
    Tensor2 {
        rows: m,
        cols: n,
        data,
    }
}
