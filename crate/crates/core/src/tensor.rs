//! Dense row-major `f64` tensors and the few kernels shared by the tape and
//! the plain-value code paths.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(mismatch(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Rows and columns, treating every leading axis as rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(mismatch(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `C = alpha * op(A) op(B) + beta * C` on raw row-major buffers.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the buffers are exactly sized for the declared strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if a.shape.len() != 2 || b.shape.len() != 2 || k != k2 {
        return Err(mismatch("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, &a.data, false, &b.data, false, 0.0, &mut out);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Lower Cholesky factor of `a + jitter * I`.
pub fn cholesky(a: &Tensor, jitter: f64) -> Result<Tensor, TensorError> {
    let (n, n2) = a.dims2();
    if a.shape.len() != 2 || n != n2 {
        return Err(mismatch("cholesky", format!("{:?}", a.shape)));
    }
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.data[j * n + j] + jitter;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(TensorError::NotPositiveDefinite);
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a.data[i * n + j];
            let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            for (x, y) in ri.iter().zip(rj) {
                s -= x * y;
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(Tensor {
        shape: vec![n, n],
        data: l,
    })
}

/// Solves `L X = B` (or `L^T X = B` when `transpose`) for lower-triangular `L`.
pub fn tri_solve(l: &Tensor, b: &Tensor, transpose: bool) -> Result<Tensor, TensorError> {
    let (n, n2) = l.dims2();
    if l.shape.len() != 2 || n != n2 || b.shape.len() != 2 || b.shape[0] != n {
        return Err(mismatch(
            "tri_solve",
            format!("{:?} \\ {:?}", l.shape, b.shape),
        ));
    }
    let m = b.shape[1];
    let mut x = b.data.clone();
    let ld = &l.data;
    if !transpose {
        for i in 0..n {
            for k in 0..i {
                let lik = ld[i * n + k];
                if lik != 0.0 {
                    for c in 0..m {
                        x[i * m + c] -= lik * x[k * m + c];
                    }
                }
            }
            let d = ld[i * n + i];
            for c in 0..m {
                x[i * m + c] /= d;
            }
        }
    } else {
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let lki = ld[k * n + i];
                if lki != 0.0 {
                    for c in 0..m {
                        x[i * m + c] -= lki * x[k * m + c];
                    }
                }
            }
            let d = ld[i * n + i];
            for c in 0..m {
                x[i * m + c] /= d;
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: x,
    })
}

/// Cholesky with escalating jitter `0, 1e-8, 1e-7, ..., 1e-4`.
///
/// Returns the factor and the jitter that succeeded.
pub fn cholesky_jittered(a: &Tensor) -> Result<(Tensor, f64), TensorError> {
    if let Ok(l) = cholesky(a, 0.0) {
        return Ok((l, 0.0));
    }
    for jitter in JITTER_LADDER {
        if let Ok(l) = cholesky(a, jitter) {
            return Ok((l, jitter));
        }
    }
    Err(TensorError::NotPositiveDefinite)
}

/// Cholesky factor of a symmetric positive semidefinite matrix.
///
/// Pivots at or below `tol` times the largest diagonal entry are treated as
/// exact zeros, so singular inputs (including the zero matrix) factor
/// without jitter and `L L^T` reproduces the input on its range.
pub fn psd_cholesky(a: &Tensor, tol: f64) -> Result<Tensor, TensorError> {
    let (n, n2) = a.dims2();
    if a.shape.len() != 2 || n != n2 {
        return Err(mismatch("psd_cholesky", format!("{:?}", a.shape)));
    }
    let scale = (0..n).map(|i| a.data[i * n + i]).fold(0.0, f64::max);
    let floor = tol * scale;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.data[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !d.is_finite() || d < -1e-6 * scale.max(1.0) {
            return Err(TensorError::NotPositiveDefinite);
        }
        if d <= floor {
            continue;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a.data[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(Tensor {
        shape: vec![n, n],
        data: l,
    })
}

pub(crate) const JITTER_LADDER: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Solves `A X = B` given the lower Cholesky factor of `A`.
pub fn cho_solve(l: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    tri_solve(l, &tri_solve(l, b, false)?, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn gemm_transposes() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut c = vec![0.0; 4];
        gemm(2, 3, 2, 1.0, a.data(), false, a.data(), true, 0.0, &mut c);
        assert_eq!(c, vec![14., 32., 32., 77.]);
        let mut c = vec![0.0; 9];
        gemm(3, 2, 3, 1.0, a.data(), true, a.data(), false, 0.0, &mut c);
        assert_eq!(c, vec![17., 22., 27., 22., 29., 36., 27., 36., 45.]);
    }

    #[test]
    fn cholesky_and_solves() {
        let a = Tensor::matrix(3, 3, vec![4., 2., 0.6, 2., 5., 1., 0.6, 1., 3.]).unwrap();
        let l = cholesky(&a, 0.0).unwrap();
        let llt = matmul(&l, &l.transpose()).unwrap();
        assert!(llt.max_abs_diff(&a) < 1e-12);
        let b = Tensor::matrix(3, 1, vec![1., 2., 3.]).unwrap();
        let x = cho_solve(&l, &b).unwrap();
        assert!(matmul(&a, &x).unwrap().max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn psd_cholesky_handles_singular() {
        let z = Tensor::zeros(&[3, 3]);
        assert_eq!(psd_cholesky(&z, 1e-12).unwrap(), z);
        let a = Tensor::matrix(2, 2, vec![1., 1., 1., 1.]).unwrap();
        let l = psd_cholesky(&a, 1e-12).unwrap();
        assert!(matmul(&l, &l.transpose()).unwrap().max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Tensor::matrix(2, 2, vec![1., 2., 2., 1.]).unwrap();
        assert_eq!(cholesky(&a, 0.0), Err(TensorError::NotPositiveDefinite));
        assert!(cholesky_jittered(&a).is_err());
        let singular = Tensor::matrix(2, 2, vec![1., 1., 1., 1.]).unwrap();
        let (_, jitter) = cholesky_jittered(&singular).unwrap();
        assert!(jitter > 0.0);
    }
}
