//! Small dense helpers shared by the estimator and the inference code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Symmetric eigenvalues, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut d: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    d.sort_by(|a, b| a.total_cmp(b));
    d
}

/// Ratio of the largest to smallest absolute eigenvalue; infinite when singular.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let d = sym_eigenvalues(m);
    let max = d.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let min = d.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Cholesky factor of `x^T x + lambda I`.
pub fn ridge_gram_cholesky(x: &DMatrix<f64>, lambda: f64) -> Option<Cholesky<f64, Dyn>> {
    let q = x.ncols();
    let mut g = x.tr_mul(x);
    for i in 0..q {
        g[(i, i)] += lambda;
    }
    Cholesky::new(g)
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

pub fn positive_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

/// Column-stacking vectorization.
pub fn vec_col(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec_col(v: &DVector<f64>, nrows: usize, ncols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(nrows, ncols, v.as_slice())
}

/// `(a kron b)` materialized densely. Test and diagnostic use only; the
/// inference path never forms it.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

/// Serde adapter storing a matrix as an array of rows.
pub mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}
