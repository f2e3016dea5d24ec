//! Dense Cholesky factorization and triangular solves.
//!
//! Every quadratic form and generalized least squares solve in the crate goes
//! through [`Cholesky`]; nothing forms an explicit inverse of a covariance.
//! The factorization works column-by-column on nalgebra's column-major storage
//! so the inner loops are contiguous slice updates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Jitter schedule relative to the matrix scale: 1e-8, 1e-7, ..., 1e-4.
const JITTER_STEPS: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
    jitter: f64,
}

impl Cholesky {
    /// Factor a symmetric positive definite matrix. Only the lower triangle is read.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let mut l = a.clone();
        factor_in_place(&mut l)
            .map_err(|j| Error::numerical(format!("matrix is not positive definite (pivot {j})")))?;
        Ok(Cholesky { l, jitter: 0.0 })
    }

    /// Factor `a + jitter * I`, escalating the jitter from `1e-8 * scale` up
    /// to `1e-4 * scale` until the factorization succeeds.
    ///
    /// A matrix that is identically zero factors to the zero matrix.
    pub fn with_jitter(a: &DMatrix<f64>, scale: f64) -> Result<Self> {
        let n = a.nrows();
        if a.iter().all(|&v| v == 0.0) {
            return Ok(Cholesky { l: DMatrix::zeros(n, n), jitter: 0.0 });
        }
        let mut l = a.clone();
        if factor_in_place(&mut l).is_ok() {
            return Ok(Cholesky { l, jitter: 0.0 });
        }
        let scale = if scale > 0.0 { scale } else { max_abs_diag(a).max(f64::MIN_POSITIVE) };
        let mut last_pivot = 0;
        for step in JITTER_STEPS {
            let jitter = step * scale;
            l.copy_from(a);
            for i in 0..n {
                l[(i, i)] += jitter;
            }
            match factor_in_place(&mut l) {
                Ok(()) => {
                    log::debug!("cholesky succeeded with jitter {jitter:e}");
                    return Ok(Cholesky { l, jitter });
                }
                Err(j) => last_pivot = j,
            }
        }
        Err(Error::numerical(format!(
            "cholesky failed at pivot {last_pivot} of {n} after jitter up to {:e}",
            JITTER_STEPS[JITTER_STEPS.len() - 1] * scale
        )))
    }

    /// Wrap a factor produced by [`factor_in_place`].
    pub(crate) fn from_factor(l: DMatrix<f64>) -> Self {
        Cholesky { l, jitter: 0.0 }
    }

    /// Give back the factor's storage for reuse.
    pub(crate) fn into_factor(self) -> DMatrix<f64> {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Lower triangular factor `L` with `L Lᵀ = A + jitter·I`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `log |A|`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>()
    }

    /// `L⁻¹ B`.
    pub fn whiten(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for c in 0..x.ncols() {
            forward_in_place(&self.l, x.column_mut(c).as_mut_slice());
        }
        x
    }

    /// `L⁻¹ b`.
    pub fn whiten_vec(&self, b: &[f64]) -> DVector<f64> {
        let mut x = DVector::from_column_slice(b);
        forward_in_place(&self.l, x.as_mut_slice());
        x
    }

    /// `A⁻¹ B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = self.whiten(b);
        for c in 0..x.ncols() {
            backward_in_place(&self.l, x.column_mut(c).as_mut_slice());
        }
        x
    }

    /// `A⁻¹ b`.
    pub fn solve_vec(&self, b: &[f64]) -> DVector<f64> {
        let mut x = self.whiten_vec(b);
        backward_in_place(&self.l, x.as_mut_slice());
        x
    }

    /// `xᵀ A⁻¹ y`.
    pub fn quad_form(&self, x: &[f64], y: &[f64]) -> f64 {
        self.whiten_vec(x).dot(&self.whiten_vec(y))
    }

    /// `L z`, the map from white noise to a draw with covariance `A`.
    pub fn color(&self, z: &[f64]) -> DVector<f64> {
        let n = self.dim();
        let mut out = DVector::zeros(n);
        let o = out.as_mut_slice();
        for (j, &zj) in z.iter().enumerate().take(n) {
            if zj == 0.0 {
                continue;
            }
            let col = &self.l.as_slice()[j * n..(j + 1) * n];
            for i in j..n {
                o[i] += col[i] * zj;
            }
        }
        out
    }

    /// Reciprocal condition estimate from the factor's diagonal, squared.
    /// Cheap and only indicative; used for warnings.
    pub fn condition_estimate(&self) -> f64 {
        let diag = (0..self.dim()).map(|i| self.l[(i, i)]);
        let (lo, hi) = diag.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
        (hi / lo).powi(2)
    }
}

fn max_abs_diag(a: &DMatrix<f64>) -> f64 {
    (0..a.nrows()).map(|i| a[(i, i)].abs()).fold(0.0, f64::max)
}

/// In-place left-looking Cholesky on column-major storage. On success the
/// lower triangle holds `L` and the strict upper triangle is zeroed. On
/// failure returns the index of the first non-positive pivot.
pub(crate) fn factor_in_place(a: &mut DMatrix<f64>) -> std::result::Result<(), usize> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky of a non-square matrix");
    let data = a.as_mut_slice();
    for j in 0..n {
        let (done, rest) = data.split_at_mut(j * n);
        let col_j = &mut rest[..n];
        for k in 0..j {
            let col_k = &done[k * n..(k + 1) * n];
            let ljk = col_k[j];
            if ljk != 0.0 {
                for (x, &l) in col_j[j..].iter_mut().zip(&col_k[j..]) {
                    *x -= ljk * l;
                }
            }
        }
        let d = col_j[j];
        if !(d > 0.0) || !d.is_finite() {
            return Err(j);
        }
        let d = d.sqrt();
        col_j[j] = d;
        let inv = 1.0 / d;
        for x in &mut col_j[j + 1..] {
            *x *= inv;
        }
        for x in &mut col_j[..j] {
            *x = 0.0;
        }
    }
    Ok(())
}

/// Solve `L x = b` in place.
fn forward_in_place(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    let data = l.as_slice();
    for j in 0..n {
        let col = &data[j * n..(j + 1) * n];
        let xj = b[j] / col[j];
        b[j] = xj;
        if xj != 0.0 {
            for (bi, &lij) in b[j + 1..].iter_mut().zip(&col[j + 1..]) {
                *bi -= xj * lij;
            }
        }
    }
}

/// Solve `Lᵀ x = b` in place.
fn backward_in_place(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    let data = l.as_slice();
    for j in (0..n).rev() {
        let col = &data[j * n..(j + 1) * n];
        let s: f64 = col[j + 1..].iter().zip(&b[j + 1..]).map(|(l, x)| l * x).sum();
        b[j] = (b[j] - s) / col[j];
    }
}

/// Cholesky of a Gram matrix `XᵀX` that reports which columns are linearly
/// dependent on earlier ones instead of failing at the first bad pivot.
///
/// A pivot is rejected when the squared residual norm of a column after
/// projecting out the earlier columns falls below `rel_tol` times its
/// original squared norm.
pub(crate) fn gram_cholesky(gram: &DMatrix<f64>, rel_tol: f64) -> std::result::Result<Cholesky, Vec<usize>> {
    let n = gram.nrows();
    let mut l = gram.clone();
    let mut dependent = Vec::new();
    {
        let data = l.as_mut_slice();
        for j in 0..n {
            let orig = data[j * n + j];
            let (done, rest) = data.split_at_mut(j * n);
            let col_j = &mut rest[..n];
            for k in 0..j {
                let col_k = &done[k * n..(k + 1) * n];
                let ljk = col_k[j];
                for (x, &v) in col_j[j..].iter_mut().zip(&col_k[j..]) {
                    *x -= ljk * v;
                }
            }
            let d = col_j[j];
            if !(d > rel_tol * orig) || !(orig > 0.0) {
                dependent.push(j);
                col_j.iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            let d = d.sqrt();
            col_j[j] = d;
            for x in &mut col_j[j + 1..] {
                *x /= d;
            }
            for x in &mut col_j[..j] {
                *x = 0.0;
            }
        }
    }
    if dependent.is_empty() {
        Ok(Cholesky { l, jitter: 0.0 })
    } else {
        Err(dependent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spd(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| (-((i as f64 - j as f64).abs()) / 2.0).exp())
    }

    #[test]
    fn factor_reconstructs_matrix() {
        let a = spd(12);
        let c = Cholesky::new(&a).unwrap();
        let l = c.factor();
        assert_relative_eq!(l * l.transpose(), a, epsilon = 1e-12);
        let nal = a.clone().cholesky().unwrap();
        assert_relative_eq!(c.log_det(), 2.0 * nal.l().diagonal().map(f64::ln).sum(), epsilon = 1e-12);
    }

    #[test]
    fn solves_match_nalgebra() {
        let a = spd(9);
        let b = DMatrix::from_fn(9, 2, |i, j| (i * 3 + j) as f64 - 4.0);
        let c = Cholesky::new(&a).unwrap();
        let expected = a.clone().cholesky().unwrap().solve(&b);
        assert_relative_eq!(c.solve(&b), expected, epsilon = 1e-10);
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let direct = DVector::from_vec(x.clone()).dot(&c.solve_vec(&y));
        assert_relative_eq!(c.quad_form(&x, &y), direct, epsilon = 1e-10);
    }

    #[test]
    fn jitter_rescues_singular_matrix() {
        let a = DMatrix::from_element(3, 3, 1.0);
        assert!(Cholesky::new(&a).is_err());
        let c = Cholesky::with_jitter(&a, 1.0).unwrap();
        assert!(c.jitter() > 0.0 && c.jitter() <= 1e-4);
    }

    #[test]
    fn zero_matrix_factors_to_zero() {
        let c = Cholesky::with_jitter(&DMatrix::zeros(4, 4), 0.0).unwrap();
        assert!(c.factor().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indefinite_matrix_fails_with_diagnostic() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = Cholesky::with_jitter(&a, 1.0).unwrap_err();
        assert!(err.to_string().contains("pivot"));
    }

    #[test]
    fn gram_cholesky_names_dependent_columns() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 1.0, 2.0, 1.0, 2.0, 3.0, 1.0, 3.0, 4.0, 1.0, 4.0, 5.0]);
        let err = gram_cholesky(&(x.transpose() * &x), 1e-10).unwrap_err();
        assert_eq!(err, vec![2]);
    }
}
