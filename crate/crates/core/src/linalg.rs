//! Small dense linear-algebra helpers over nalgebra.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{DesignError, Result};

/// Cholesky factor of `m`, or the offending smallest eigenvalue.
pub fn require_spd(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(DesignError::NotPositiveDefinite { eigenvalue: f64::NAN });
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-9 * m.amax().max(1.0) {
        return Err(DesignError::InvalidConfig(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(c),
        None => Err(DesignError::NotPositiveDefinite {
            eigenvalue: min_eigenvalue(m),
        }),
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `xᵀ A x` for a symmetric `A` stored row-major in `a`.
#[inline]
pub(crate) fn quad_form(a: &[f64], x: &[f64]) -> f64 {
    let p = x.len();
    let mut acc = 0.0;
    for r in 0..p {
        let row = &a[r * p..(r + 1) * p];
        let mut s = 0.0;
        for c in 0..p {
            s += row[c] * x[c];
        }
        acc += x[r] * s;
    }
    acc
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        out.extend(m.row(i).iter());
    }
    out
}

/// Serializes a `DMatrix` as `{rows, cols, data}` with row-major data.
pub mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        Repr {
            rows: m.nrows(),
            cols: m.ncols(),
            data: super::row_major(m),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let r = Repr::deserialize(d)?;
        if r.data.len() != r.rows * r.cols {
            return Err(serde::de::Error::custom("matrix data length mismatch"));
        }
        Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
    }
}
