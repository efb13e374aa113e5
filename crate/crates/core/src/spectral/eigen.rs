use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::RealMatrix;

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;

/// Sample covariance `(1/T) U Uᵀ` of an `N x T` matrix. The result is exactly
/// symmetric.
pub fn covariance(u: &RealMatrix) -> Result<DMatrix<f64>> {
    let (n, t) = u.shape();
    if n == 0 || t == 0 {
        return Err(Error::InvalidArgument(format!(
            "covariance needs a nonempty matrix, got {n}x{t}"
        )));
    }
    let mut c = u * u.transpose();
    c /= t as f64;
    symmetrize(&mut c);
    Ok(c)
}

fn symmetrize(c: &mut DMatrix<f64>) {
    let n = c.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax().max(1.0);
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if worst > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(worst));
    }
    Ok(())
}

/// All eigenvalues of a symmetric matrix, descending. No sign clamping.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_symmetric(m)?;
    let mut vals: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(vals)
}

/// Eigenpairs of a symmetric matrix sorted by descending eigenvalue.
/// Each eigenvector is normalised so its largest-magnitude component is
/// positive (ties resolved toward the lowest index).
pub fn symmetric_eigen(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    check_symmetric(m)?;
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let mut vectors = DMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src]);
        let col = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        vectors.column_mut(dst).copy_from(&(col * sign));
    }
    Ok((values, vectors))
}

/// Descending, nonnegative eigenvalues of a sample covariance together with
/// the shape `N x T` of the matrix that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSpectrum {
    values: Vec<f64>,
    n: usize,
    t: usize,
}

impl EigenSpectrum {
    /// Builds a spectrum from raw eigenvalues, sorting them and clamping
    /// values in `[-1e-10·scale, 0)` to zero.
    pub fn new(mut values: Vec<f64>, n: usize, t: usize) -> Result<Self> {
        if t == 0 || n == 0 {
            return Err(Error::InvalidArgument("spectrum shape must be nonzero".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite eigenvalue".into()));
        }
        values.sort_by(|a, b| b.total_cmp(a));
        let scale = values.first().map_or(1.0, |v| v.abs().max(1.0));
        for v in &mut values {
            if *v < 0.0 {
                if *v < -PSD_TOL * scale {
                    return Err(Error::NotPsd(*v));
                }
                *v = 0.0;
            }
        }
        Ok(Self { values, n, t })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Aspect ratio `N/T`.
    pub fn c(&self) -> f64 {
        self.n as f64 / self.t as f64
    }

    pub fn top(&self) -> Option<f64> {
        self.values.first().copied()
    }

    pub fn trace(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn median(&self) -> Option<f64> {
        let k = self.values.len();
        if k == 0 {
            return None;
        }
        // values are descending
        Some(if k % 2 == 1 {
            self.values[k / 2]
        } else {
            0.5 * (self.values[k / 2 - 1] + self.values[k / 2])
        })
    }

    /// Multiplies every eigenvalue by `alpha > 0`.
    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * alpha).collect(),
            n: self.n,
            t: self.t,
        }
    }
}

/// Spectrum of a sample covariance; `t` is the sample count used for `c = N/T`.
pub fn eigenvalues(cov: &DMatrix<f64>, t: usize) -> Result<EigenSpectrum> {
    let vals = symmetric_eigenvalues(cov)?;
    EigenSpectrum::new(vals, cov.nrows(), t)
}

/// Spectrum of `(1/T) U Uᵀ`.
pub fn spectrum_of(u: &RealMatrix) -> Result<EigenSpectrum> {
    eigenvalues(&covariance(u)?, u.ncols())
}
