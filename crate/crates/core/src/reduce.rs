//! PCA for high-dimensional covariates, with a streaming update.
//!
//! The streaming update is an incremental SVD with mean correction: the
//! retained spectrum `diag(s) V`, the centered batch, and a mean-shift row
//! are stacked and re-decomposed. The full rank `min(n, p)` basis is kept
//! internally, so the update reproduces batch PCA up to rounding; only the
//! leading `q` directions are exposed.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::CovariateSet;
use crate::error::{DesignError, Result};
use crate::linalg::serde_matrix;

/// How many components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PcaTarget {
    Components(usize),
    /// Smallest `q` whose cumulative explained variance reaches the fraction.
    VarianceFraction(f64),
}

impl Default for PcaTarget {
    fn default() -> Self {
        PcaTarget::VarianceFraction(0.8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaState {
    mean: Vec<f64>,
    q: usize,
    /// All retained directions (`r x p`, `r = min(n, p)`), leading first.
    #[serde(with = "serde_matrix")]
    basis: DMatrix<f64>,
    singular: Vec<f64>,
    n_seen: usize,
}

impl PcaState {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn n_seen(&self) -> usize {
        self.n_seen
    }

    /// Leading `q x p` orthonormal rows.
    pub fn components(&self) -> DMatrix<f64> {
        self.basis.rows(0, self.q).into_owned()
    }

    /// Variances along the leading `q` directions, descending.
    pub fn explained_variance(&self) -> Vec<f64> {
        self.all_variances().into_iter().take(self.q).collect()
    }

    /// Share of total variance captured by the leading `q` directions.
    pub fn explained_fraction(&self) -> f64 {
        let all = self.all_variances();
        let total: f64 = all.iter().sum();
        if total == 0.0 {
            return 1.0;
        }
        all.iter().take(self.q).sum::<f64>() / total
    }

    fn all_variances(&self) -> Vec<f64> {
        let denom = (self.n_seen.max(2) - 1) as f64;
        self.singular.iter().map(|s| s * s / denom).collect()
    }
}

fn centered(data: &CovariateSet, mean: &[f64]) -> DMatrix<f64> {
    let p = data.dim();
    DMatrix::from_fn(data.len(), p, |i, k| data.row(i)[k] - mean[k])
}

fn column_mean(data: &CovariateSet) -> Vec<f64> {
    let mut mean = vec![0.0; data.dim()];
    for row in data.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = data.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Right singular vectors and values of `m`, sorted descending, keeping
/// `min(rows, cols)` directions with a deterministic sign.
fn sorted_svd(m: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let p = m.ncols();
    let svd = m.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| DesignError::Degenerate("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut basis = DMatrix::zeros(order.len(), p);
    let mut singular = Vec::with_capacity(order.len());
    for (r, &k) in order.iter().enumerate() {
        let mut row = vt.row(k).into_owned();
        let lead = row
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            row.neg_mut();
        }
        basis.set_row(r, &row);
        singular.push(svd.singular_values[k]);
    }
    Ok((basis, singular))
}

fn choose_q(singular: &[f64], n: usize, p: usize, target: PcaTarget) -> Result<usize> {
    match target {
        PcaTarget::Components(q) => {
            if q == 0 || q > p {
                return Err(DesignError::InvalidConfig(format!(
                    "component count {q} must be in 1..={p}"
                )));
            }
            if q > singular.len() {
                return Err(DesignError::InvalidConfig(format!(
                    "{q} components requested from {n} samples"
                )));
            }
            Ok(q)
        }
        PcaTarget::VarianceFraction(tau) => {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(DesignError::InvalidConfig(format!(
                    "variance fraction {tau} outside (0, 1]"
                )));
            }
            let var: Vec<f64> = singular.iter().map(|s| s * s).collect();
            let total: f64 = var.iter().sum();
            if total == 0.0 {
                return Err(DesignError::Degenerate("all covariates are constant".into()));
            }
            let mut acc = 0.0;
            for (k, v) in var.iter().enumerate() {
                acc += v;
                // Relative slack so τ = 1 is reachable despite rounding.
                if acc >= tau * total * (1.0 - 1e-12) {
                    return Ok(k + 1);
                }
            }
            Ok(var.len())
        }
    }
}

pub fn fit_pca(data: &CovariateSet, target: PcaTarget) -> Result<PcaState> {
    data.require_min_units(2)?;
    let mean = column_mean(data);
    let (basis, singular) = sorted_svd(centered(data, &mean))?;
    let q = choose_q(&singular, data.len(), data.dim(), target)?;
    Ok(PcaState {
        mean,
        q,
        basis,
        singular,
        n_seen: data.len(),
    })
}

/// Folds `batch` into the decomposition. `q` is kept from the initial fit.
pub fn update_pca(state: &PcaState, batch: &CovariateSet) -> Result<PcaState> {
    batch.require_dim(state.dim())?;
    if batch.is_empty() {
        return Ok(state.clone());
    }
    let p = state.dim();
    let n_old = state.n_seen as f64;
    let m = batch.len() as f64;
    let n = n_old + m;
    let batch_mean = column_mean(batch);
    let r = state.singular.len();
    let mut stacked = DMatrix::zeros(r + batch.len() + 1, p);
    for k in 0..r {
        let row = state.basis.row(k) * state.singular[k];
        stacked.set_row(k, &row);
    }
    for i in 0..batch.len() {
        for c in 0..p {
            stacked[(r + i, c)] = batch.row(i)[c] - batch_mean[c];
        }
    }
    let shift = (n_old * m / n).sqrt();
    for c in 0..p {
        stacked[(r + batch.len(), c)] = shift * (state.mean[c] - batch_mean[c]);
    }
    let (basis, singular) = sorted_svd(stacked)?;
    let keep = singular.len().min(p).min(state.n_seen + batch.len());
    let mean = (0..p)
        .map(|c| (n_old * state.mean[c] + m * batch_mean[c]) / n)
        .collect();
    Ok(PcaState {
        mean,
        q: state.q,
        basis: basis.rows(0, keep).into_owned(),
        singular: singular[..keep].to_vec(),
        n_seen: state.n_seen + batch.len(),
    })
}

/// `(data − mean) · componentsᵀ`, keeping unit ids.
pub fn transform(state: &PcaState, data: &CovariateSet) -> Result<CovariateSet> {
    data.require_dim(state.dim())?;
    let scores = centered(data, &state.mean) * state.components().transpose();
    if data.is_empty() {
        return Ok(CovariateSet::empty(state.q));
    }
    CovariateSet::from_matrix(data.unit_ids().to_vec(), &scores)
}

/// Maps scores back to the original coordinates.
pub fn inverse_transform(state: &PcaState, scores: &CovariateSet) -> Result<CovariateSet> {
    scores.require_dim(state.q)?;
    let mut out = scores.to_matrix() * state.components();
    for mut row in out.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(&state.mean) {
            *v += m;
        }
    }
    CovariateSet::from_matrix(scores.unit_ids().to_vec(), &out)
}

/// Largest principal angle (radians) between the row spaces of `a` and `b`.
/// Both must have orthonormal rows.
pub fn largest_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() || a.nrows() != b.nrows() {
        return Err(DesignError::DimensionMismatch {
            expected: a.nrows() * a.ncols(),
            found: b.nrows() * b.ncols(),
        });
    }
    let cosines = (a * b.transpose()).singular_values();
    let min = cosines.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(min.clamp(-1.0, 1.0).acos())
}
