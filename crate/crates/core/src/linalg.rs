//! Design matrices and orthogonal-factorisation solves.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative threshold on `|R_jj| / max |R_ii|` below which a design is treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("design is rank deficient: column `{column}` is (nearly) collinear with earlier columns")]
    Singular { column: String },
    #[error("design has {rows} rows but needs more than {cols}")]
    TooFewRows { rows: usize, cols: usize },
    #[error("design contains non-finite values")]
    NonFinite,
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Regressors with column labels; column 0 is the intercept when present.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    matrix: DMatrix<f64>,
    labels: Vec<String>,
}

impl DesignMatrix {
    pub fn new(matrix: DMatrix<f64>, labels: Vec<String>) -> Result<Self, LinalgError> {
        if labels.len() != matrix.ncols() {
            return Err(LinalgError::Dimension(format!(
                "{} labels for {} columns",
                labels.len(),
                matrix.ncols()
            )));
        }
        if matrix.nrows() <= matrix.ncols() {
            return Err(LinalgError::TooFewRows {
                rows: matrix.nrows(),
                cols: matrix.ncols(),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { matrix, labels })
    }

    /// Intercept followed by the given named columns.
    pub fn with_intercept(columns: &[(&str, &[f64])]) -> Result<Self, LinalgError> {
        let n = columns.first().map(|c| c.1.len()).unwrap_or(0);
        if columns.iter().any(|c| c.1.len() != n) {
            return Err(LinalgError::Dimension("columns differ in length".into()));
        }
        let k = columns.len() + 1;
        let m = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { columns[j - 1].1[i] });
        let mut labels = vec!["const".to_string()];
        labels.extend(columns.iter().map(|c| c.0.to_string()));
        Self::new(m, labels)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Copy with column `j` replaced.
    pub fn replace_column(&self, j: usize, values: &[f64]) -> Self {
        let mut m = self.matrix.clone();
        m.set_column(j, &DVector::from_column_slice(values));
        Self {
            matrix: m,
            labels: self.labels.clone(),
        }
    }
}

/// Least-squares solution plus `(X'X)^{-1}` from a Householder QR.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub coefficients: DVector<f64>,
    pub xtx_inv: DMatrix<f64>,
}

pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, labels: &[String]) -> Result<LeastSquares, LinalgError> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(LinalgError::Dimension(format!("{} responses for {} rows", y.len(), n)));
    }
    if n < k {
        return Err(LinalgError::TooFewRows { rows: n, cols: k });
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..k).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    for j in 0..k {
        if !(r[(j, j)].abs() > RANK_TOL * scale) {
            return Err(LinalgError::Singular {
                column: labels.get(j).cloned().unwrap_or_else(|| format!("#{j}")),
            });
        }
    }
    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    let rhs = qty.rows(0, k).into_owned();
    let coefficients = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| LinalgError::Singular { column: "?".into() })?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| LinalgError::Singular { column: "?".into() })?;
    let xtx_inv = &r_inv * r_inv.transpose();
    Ok(LeastSquares {
        coefficients,
        xtx_inv: symmetrize(xtx_inv),
    })
}

pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Lower Cholesky factor, or an error when `m` is not positive definite.
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or(LinalgError::NotPositiveDefinite)
}
