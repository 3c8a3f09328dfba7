//! Bandwidth matrices for the Gaussian KDE.
//!
//! The bandwidth is the full-matrix generalisation of Scott's rule,
//! `H = n^{-2/(p+4)} Σ̂`, where `Σ̂` shrinks the sample covariance toward a
//! scaled identity:
//!
//! ```text
//! Σ̂(λ) = (1 - λ) S + λ (tr S / p) I
//! ```
//!
//! `λ` defaults to the Ledoit–Wolf plug-in estimate, clipped to `[0, 1]`.
//! `S` is the maximum-likelihood covariance (divisor `n`).
//!
//! For streaming use, [`BandwidthState`] keeps raw moments (up to fourth
//! order in the norm) about a fixed origin, which is exactly what the
//! Ledoit–Wolf coefficient needs; [`BandwidthState::update_inverse`] folds
//! a batch into those moments and rebuilds `H⁻¹`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::CovariateSet;
use crate::error::{DesignError, Result};
use crate::linalg;

/// Relative eigenvalue floor for the shrunk covariance, as a multiple of `tr S / p`.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// `n^{-2/(p+4)} Σ̂`.
pub fn rule_of_thumb(cov_estimate: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    if !cov_estimate.is_square() {
        return Err(DesignError::DimensionMismatch {
            expected: cov_estimate.nrows(),
            found: cov_estimate.ncols(),
        });
    }
    if n < 2 {
        return Err(DesignError::InvalidCovariates("rule of thumb needs n >= 2".into()));
    }
    linalg::require_spd(cov_estimate)?;
    let p = cov_estimate.nrows() as f64;
    Ok(cov_estimate * scott_factor(n, p))
}

fn scott_factor(n: usize, p: f64) -> f64 {
    (n as f64).powf(-2.0 / (p + 4.0))
}

/// Result of [`shrinkage_covariance`].
#[derive(Debug, Clone)]
pub struct Shrinkage {
    pub covariance: DMatrix<f64>,
    pub lambda: f64,
    /// True when `lambda` had to be raised to respect [`EIGEN_FLOOR`].
    pub floor_raised: bool,
}

/// Shrinkage covariance of `data` with the Ledoit–Wolf coefficient, or a fixed
/// `lambda` when given.
pub fn shrinkage_covariance(data: &CovariateSet, lambda: Option<f64>) -> Result<Shrinkage> {
    data.require_min_units(2)?;
    let x = data.to_matrix();
    let n = x.nrows() as f64;
    let mean = x.row_mean();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let s = centered.transpose() * &centered / n;
    let fourth: f64 = centered.row_iter().map(|r| r.norm_squared().powi(2)).sum();
    shrink(&s, n, fourth, lambda)
}

/// Ledoit–Wolf coefficient from `S` (divisor `n`) and `Σ_k ‖x_k − x̄‖⁴`.
pub fn ledoit_wolf_lambda(s: &DMatrix<f64>, n: f64, sum_fourth: f64) -> f64 {
    let p = s.nrows() as f64;
    let m = s.trace() / p;
    let mut target_gap = s.clone();
    for i in 0..s.nrows() {
        target_gap[(i, i)] -= m;
    }
    let d2 = target_gap.norm_squared();
    if d2 <= 0.0 {
        return 1.0;
    }
    let b2_bar = ((sum_fourth - n * s.norm_squared()) / (n * n)).max(0.0);
    (b2_bar.min(d2) / d2).clamp(0.0, 1.0)
}

fn shrink(s: &DMatrix<f64>, n: f64, sum_fourth: f64, lambda: Option<f64>) -> Result<Shrinkage> {
    let p = s.nrows();
    let m = s.trace() / p as f64;
    if m.is_nan() || m <= 0.0 {
        return Err(DesignError::Degenerate("all covariates are constant (tr S = 0)".into()));
    }
    let mut lambda = match lambda {
        Some(l) if (0.0..=1.0).contains(&l) => l,
        Some(l) => {
            return Err(DesignError::InvalidConfig(format!(
                "shrinkage coefficient {l} outside [0, 1]"
            )))
        }
        None => ledoit_wolf_lambda(s, n, sum_fourth),
    };
    let s_min = linalg::min_eigenvalue(s);
    let floor = EIGEN_FLOOR * m;
    let mut floor_raised = false;
    if (1.0 - lambda) * s_min + lambda * m < floor {
        lambda = ((floor - s_min) / (m - s_min)).clamp(lambda, 1.0);
        floor_raised = true;
    }
    Ok(Shrinkage {
        covariance: shrink_toward_identity(s, lambda),
        lambda,
        floor_raised,
    })
}

/// `(1 - λ) S + λ (tr S / p) I`.
pub fn shrink_toward_identity(s: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let p = s.nrows();
    let m = s.trace() / p as f64;
    let mut out = s * (1.0 - lambda);
    for i in 0..p {
        out[(i, i)] += lambda * m;
    }
    out
}

/// Raw moments about a fixed origin `o`, with `y = x - o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    origin: Vec<f64>,
    /// `Σ y`
    sum: Vec<f64>,
    /// `Σ y yᵀ`, row-major
    outer: Vec<f64>,
    /// `Σ ‖y‖² y`
    norm_weighted: Vec<f64>,
    /// `Σ ‖y‖⁴`
    fourth: f64,
}

impl Moments {
    fn new(origin: Vec<f64>) -> Self {
        let p = origin.len();
        Self {
            origin,
            sum: vec![0.0; p],
            outer: vec![0.0; p * p],
            norm_weighted: vec![0.0; p],
            fourth: 0.0,
        }
    }

    fn add(&mut self, data: &CovariateSet) {
        let p = self.origin.len();
        let mut y = vec![0.0; p];
        for row in data.rows() {
            for k in 0..p {
                y[k] = row[k] - self.origin[k];
            }
            let sq: f64 = y.iter().map(|v| v * v).sum();
            for a in 0..p {
                self.sum[a] += y[a];
                self.norm_weighted[a] += sq * y[a];
                for b in 0..p {
                    self.outer[a * p + b] += y[a] * y[b];
                }
            }
            self.fourth += sq * sq;
        }
    }

    /// Mean, scatter `Σ (x - x̄)(x - x̄)ᵀ` and `Σ ‖x - x̄‖⁴` for `n` samples.
    fn centered(&self, n: f64) -> (DVector<f64>, DMatrix<f64>, f64) {
        let p = self.origin.len();
        let c = DVector::from_iterator(p, self.sum.iter().map(|v| v / n));
        let s1 = DVector::from_column_slice(&self.sum);
        let s2 = DMatrix::from_row_slice(p, p, &self.outer);
        let s3 = DVector::from_column_slice(&self.norm_weighted);
        let scatter = &s2 - &c * c.transpose() * n;
        let cc = c.norm_squared();
        let fourth = self.fourth - 4.0 * c.dot(&s3) + 4.0 * (c.transpose() * &s2 * &c)[(0, 0)] + 2.0 * cc * s2.trace()
            - 4.0 * cc * c.dot(&s1)
            + n * cc * cc;
        let mean = DVector::from_column_slice(&self.origin) + c;
        (mean, scatter, fourth)
    }
}

/// Bandwidth `H`, its inverse, and the sufficient statistics needed to
/// rebuild it when more samples arrive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthState {
    #[serde(with = "linalg::serde_matrix")]
    matrix: DMatrix<f64>,
    #[serde(with = "linalg::serde_matrix")]
    inverse: DMatrix<f64>,
    log_det_neg_half: f64,
    n: usize,
    lambda: f64,
    lambda_override: Option<f64>,
    floor_raised: bool,
    mean: Vec<f64>,
    #[serde(with = "linalg::serde_matrix")]
    scatter: DMatrix<f64>,
    moments: Option<Moments>,
}

impl BandwidthState {
    /// Shrinkage rule-of-thumb bandwidth for `data`.
    pub fn from_data(data: &CovariateSet, lambda_override: Option<f64>) -> Result<Self> {
        data.require_min_units(2)?;
        let shrinkage = shrinkage_covariance(data, lambda_override)?;
        let h = rule_of_thumb(&shrinkage.covariance, data.len())?;
        let x = data.to_matrix();
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let scatter = centered.transpose() * centered;
        let mut moments = Moments::new(mean.iter().copied().collect());
        moments.add(data);
        let mut state = Self::with_matrix(h)?;
        state.n = data.len();
        state.lambda = shrinkage.lambda;
        state.lambda_override = lambda_override;
        state.floor_raised = shrinkage.floor_raised;
        state.mean = mean.iter().copied().collect();
        state.scatter = scatter;
        state.moments = Some(moments);
        Ok(state)
    }

    /// A fixed bandwidth `H` with no sample statistics; cannot be updated.
    pub fn fixed(h: DMatrix<f64>) -> Result<Self> {
        Self::with_matrix(h)
    }

    /// Fixed bandwidth `variance · I_p`.
    pub fn isotropic(dim: usize, variance: f64) -> Result<Self> {
        Self::fixed(DMatrix::identity(dim, dim) * variance)
    }

    fn with_matrix(h: DMatrix<f64>) -> Result<Self> {
        if !h.is_square() || h.nrows() == 0 {
            return Err(DesignError::InvalidConfig(
                "bandwidth must be a non-empty square matrix".into(),
            ));
        }
        let chol = linalg::require_spd(&h)?;
        let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        let mut inverse = chol.inverse();
        linalg::symmetrize(&mut inverse);
        let p = h.nrows();
        Ok(Self {
            matrix: h,
            inverse,
            log_det_neg_half: -0.5 * log_det,
            n: 0,
            lambda: 0.0,
            lambda_override: None,
            floor_raised: false,
            mean: vec![0.0; p],
            scatter: DMatrix::zeros(p, p),
            moments: None,
        })
    }

    /// Folds `batch` into the statistics and rebuilds `H⁻¹` for all samples
    /// seen so far.
    pub fn update_inverse(&self, batch: &CovariateSet) -> Result<Self> {
        batch.require_dim(self.dim())?;
        if batch.is_empty() {
            return Ok(self.clone());
        }
        let mut moments = self
            .moments
            .clone()
            .ok_or_else(|| DesignError::InvalidConfig("a fixed bandwidth has no statistics to update".into()))?;
        moments.add(batch);
        let n = self.n + batch.len();
        let nf = n as f64;
        let (mean, scatter, fourth) = moments.centered(nf);
        let mut s = &scatter / nf;
        linalg::symmetrize(&mut s);
        let shrinkage = shrink(&s, nf, fourth, self.lambda_override)?;
        let h = rule_of_thumb(&shrinkage.covariance, n)?;
        let mut state = Self::with_matrix(h)?;
        state.n = n;
        state.lambda = shrinkage.lambda;
        state.lambda_override = self.lambda_override;
        state.floor_raised = shrinkage.floor_raised;
        state.mean = mean.iter().copied().collect();
        state.scatter = scatter;
        state.moments = Some(moments);
        Ok(state)
    }

    pub fn dim(&self) -> usize {
        self.inverse.nrows()
    }

    /// `H`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `H⁻¹`.
    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    /// `log |H|^{-1/2}`.
    pub fn log_det_neg_half(&self) -> f64 {
        self.log_det_neg_half
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn floor_raised(&self) -> bool {
        self.floor_raised
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scatter(&self) -> &DMatrix<f64> {
        &self.scatter
    }

    /// Content hash of `H⁻¹`; grams record it to detect stale bandwidths.
    pub fn tag(&self) -> u64 {
        // FNV-1a over the bit patterns
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.inverse.iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_set(n: usize, p: usize, seed: u64) -> CovariateSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..p)
                    .map(|k| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * (k as f64 + 1.0) + 3.0
                    })
                    .collect()
            })
            .collect();
        CovariateSet::from_rows(&rows).unwrap()
    }

    #[test]
    fn scott_rule_exact_powers() {
        let h = rule_of_thumb(&DMatrix::from_element(1, 1, 1.0), 32).unwrap();
        assert_relative_eq!(h[(0, 0)], 0.25, epsilon = 1e-15);
        let h = rule_of_thumb(&DMatrix::identity(3, 3), 100).unwrap();
        assert_relative_eq!(h[(1, 1)], 100f64.powf(-2.0 / 7.0), epsilon = 1e-15);
        assert_eq!(h[(0, 1)], 0.0);
    }

    #[test]
    fn scott_rule_p4_n400() {
        let sigma = DMatrix::from_row_slice(
            4,
            4,
            &[
                2.0, 0.3, 0.1, 0.0, //
                0.3, 1.5, 0.2, 0.1, //
                0.1, 0.2, 1.0, 0.4, //
                0.0, 0.1, 0.4, 3.0,
            ],
        );
        let h = rule_of_thumb(&sigma, 400).unwrap();
        let expected = &sigma * 0.223_606_797_749_979;
        assert!((h - expected).amax() < 1e-12);
    }

    #[test]
    fn scott_rule_rejects_non_spd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            rule_of_thumb(&m, 10),
            Err(DesignError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn shrinkage_endpoints_and_midpoint() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
        let half = shrink_toward_identity(&s, 0.5);
        assert_relative_eq!(half[(0, 0)], 1.5);
        assert_relative_eq!(half[(1, 1)], 2.5);
        assert_eq!(shrink_toward_identity(&s, 0.0), s);
        let full = shrink_toward_identity(&s, 1.0);
        assert_relative_eq!(full[(0, 0)], 2.0);
        assert_relative_eq!(full[(1, 1)], 2.0);
    }

    #[test]
    fn forced_lambda_is_respected() {
        let data = random_set(50, 3, 1);
        let one = shrinkage_covariance(&data, Some(1.0)).unwrap();
        let m = one.covariance.trace() / 3.0;
        assert!((one.covariance.clone() - DMatrix::identity(3, 3) * m).amax() < 1e-12);
        let zero = shrinkage_covariance(&data, Some(0.0)).unwrap();
        assert_eq!(zero.lambda, 0.0);
    }

    #[test]
    fn constant_data_is_degenerate() {
        let data = CovariateSet::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            shrinkage_covariance(&data, None),
            Err(DesignError::Degenerate(_))
        ));
    }

    #[test]
    fn scalar_update_follows_variance_path() {
        // {0, 2}: S = 1, n = 2; {0, 2, 4}: S = 8/3, n = 3.
        let first = CovariateSet::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let state = BandwidthState::from_data(&first, None).unwrap();
        assert_relative_eq!(state.inverse()[(0, 0)], 2f64.powf(0.4), epsilon = 1e-14);
        let more = CovariateSet::from_rows_with_offset(&[vec![4.0]], 2).unwrap();
        let next = state.update_inverse(&more).unwrap();
        assert_relative_eq!(next.inverse()[(0, 0)], 3f64.powf(0.4) * 3.0 / 8.0, epsilon = 1e-14);
        assert_eq!(next.n(), 3);
        assert_relative_eq!(next.mean()[0], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn empty_batch_is_identity() {
        let data = random_set(20, 2, 4);
        let state = BandwidthState::from_data(&data, None).unwrap();
        assert_eq!(state.update_inverse(&CovariateSet::empty(2)).unwrap(), state);
    }

    #[test]
    fn two_batch_update_matches_recompute() {
        let data = random_set(120, 4, 9);
        let idx: Vec<usize> = (0..120).collect();
        let a = data.select(&idx[..50]);
        let b = data.select(&idx[50..]);
        let state = BandwidthState::from_data(&a, None).unwrap().update_inverse(&b).unwrap();
        let whole = BandwidthState::from_data(&data, None).unwrap();
        assert!((state.inverse() - whole.inverse()).amax() < 1e-8);
        assert_relative_eq!(state.lambda(), whole.lambda(), epsilon = 1e-10);
        assert_relative_eq!(state.log_det_neg_half(), whole.log_det_neg_half(), epsilon = 1e-10);
    }

    #[test]
    fn spd_when_dimension_exceeds_samples() {
        let data = random_set(30, 48, 11);
        let sh = shrinkage_covariance(&data, None).unwrap();
        assert!(sh.lambda > 0.0);
        assert!(linalg::min_eigenvalue(&sh.covariance) > 0.0);
        BandwidthState::from_data(&data, None).unwrap();
    }

    #[test]
    fn fixed_bandwidth_cannot_update() {
        let state = BandwidthState::isotropic(1, 1.0).unwrap();
        let batch = CovariateSet::from_rows(&[vec![1.0]]).unwrap();
        assert!(state.update_inverse(&batch).is_err());
        assert_eq!(state.log_det_neg_half(), 0.0);
    }

    #[test]
    fn tag_tracks_inverse() {
        let a = BandwidthState::isotropic(2, 1.0).unwrap();
        let b = BandwidthState::isotropic(2, 2.0).unwrap();
        assert_eq!(a.tag(), BandwidthState::isotropic(2, 1.0).unwrap().tag());
        assert_ne!(a.tag(), b.tag());
    }
}
