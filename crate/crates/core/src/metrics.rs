//! Balance and estimation-quality metrics for a fixed design.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bandwidth::shrink_toward_identity;
use crate::data::{CovariateSet, Partition};
use crate::error::{DesignError, Result};

/// A named function of one unit's covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisTerm {
    Intercept,
    Linear(usize),
    Square(usize),
    Interaction(usize, usize),
}

impl BasisTerm {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match *self {
            BasisTerm::Intercept => 1.0,
            BasisTerm::Linear(j) => z[j],
            BasisTerm::Square(j) => z[j] * z[j],
            BasisTerm::Interaction(j, k) => z[j] * z[k],
        }
    }

    /// Covariate indices are one-based in names: `z1`, `z1^2`, `z3*z4`.
    pub fn name(&self) -> String {
        match *self {
            BasisTerm::Intercept => "1".into(),
            BasisTerm::Linear(j) => format!("z{}", j + 1),
            BasisTerm::Square(j) => format!("z{}^2", j + 1),
            BasisTerm::Interaction(j, k) => format!("z{}*z{}", j + 1, k + 1),
        }
    }

    fn max_index(&self) -> Option<usize> {
        match *self {
            BasisTerm::Intercept => None,
            BasisTerm::Linear(j) | BasisTerm::Square(j) => Some(j),
            BasisTerm::Interaction(j, k) => Some(j.max(k)),
        }
    }
}

/// Intercept plus every linear term.
pub fn linear_basis(p: usize) -> Vec<BasisTerm> {
    std::iter::once(BasisTerm::Intercept)
        .chain((0..p).map(BasisTerm::Linear))
        .collect()
}

/// Intercept, `z1..z5`, squares of `z1..z3`, and `z3*z4`, `z3*z5`.
pub fn extended_basis() -> Vec<BasisTerm> {
    let mut basis = linear_basis(5);
    basis.extend((0..3).map(BasisTerm::Square));
    basis.push(BasisTerm::Interaction(2, 3));
    basis.push(BasisTerm::Interaction(2, 4));
    basis
}

/// `y = Σ_l α_l x_l + u(z)ᵀβ + ε`, `ε ~ N(0, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModelSpec {
    pub basis: Vec<BasisTerm>,
    pub coefficients: Vec<f64>,
    pub treatment_effects: Vec<f64>,
    pub sigma: f64,
}

impl LinearModelSpec {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.basis.len() != self.coefficients.len() {
            return Err(DesignError::InvalidConfig(format!(
                "{} basis terms but {} coefficients",
                self.basis.len(),
                self.coefficients.len()
            )));
        }
        let mut names: Vec<String> = self.basis.iter().map(BasisTerm::name).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(DesignError::InvalidConfig("duplicate basis term".into()));
        }
        if let Some(j) = self.basis.iter().filter_map(BasisTerm::max_index).max() {
            if j >= p {
                return Err(DesignError::DimensionMismatch {
                    expected: j + 1,
                    found: p,
                });
            }
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(DesignError::InvalidConfig("noise sd must be non-negative".into()));
        }
        Ok(())
    }

    /// `u(z_i)ᵀβ` per unit.
    pub fn signal(&self, covariates: &CovariateSet) -> Vec<f64> {
        covariates
            .rows()
            .map(|z| {
                self.basis
                    .iter()
                    .zip(&self.coefficients)
                    .map(|(t, b)| t.eval(z) * b)
                    .sum()
            })
            .collect()
    }
}

/// `N x k` matrix of basis values.
pub fn basis_matrix(basis: &[BasisTerm], covariates: &CovariateSet) -> DMatrix<f64> {
    DMatrix::from_fn(covariates.len(), basis.len(), |i, j| basis[j].eval(covariates.row(i)))
}

/// `x_l = +1` if the unit is in group `l`, `−1` otherwise, for `l < L−1`.
pub fn treatment_encoding(groups: usize, group: usize) -> Vec<f64> {
    (0..groups.saturating_sub(1))
        .map(|l| if l == group { 1.0 } else { -1.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisReport {
    /// `(a, b, value)` for each group pair `a < b` (zero-based).
    pub pairs: Vec<(usize, usize, f64)>,
    pub mean: f64,
    /// Whether any pair needed the shrinkage fallback.
    pub shrunk: bool,
}

const FALLBACK_LAMBDA: f64 = 0.01;

pub fn mahalanobis_balance(covariates: &CovariateSet, partition: &Partition) -> Result<MahalanobisReport> {
    mahalanobis_balance_with(covariates, partition, true)
}

/// Per-pair `(N_a N_b / (N_a + N_b)) Δz̄ᵀ S⁻¹ Δz̄`, with `S` the covariance
/// pooled within the two groups.
pub fn mahalanobis_balance_with(
    covariates: &CovariateSet,
    partition: &Partition,
    fallback: bool,
) -> Result<MahalanobisReport> {
    partition.require_len(covariates.len())?;
    let l = partition.groups();
    let p = covariates.dim();
    let sizes = partition.sizes();
    if let Some(g) = sizes.iter().position(|&s| s < 2) {
        return Err(DesignError::InvalidPartition(format!(
            "group {} needs at least 2 units",
            g + 1
        )));
    }
    let mut means = vec![DVector::zeros(p); l];
    for (i, &g) in partition.labels().iter().enumerate() {
        means[g] += DVector::from_column_slice(covariates.row(i));
    }
    for (g, m) in means.iter_mut().enumerate() {
        *m /= sizes[g] as f64;
    }
    let mut scatter = vec![DMatrix::zeros(p, p); l];
    for (i, &g) in partition.labels().iter().enumerate() {
        let d = DVector::from_column_slice(covariates.row(i)) - &means[g];
        scatter[g] += &d * d.transpose();
    }
    let mut pairs = Vec::new();
    let mut shrunk = false;
    for a in 0..l {
        for b in (a + 1)..l {
            let (na, nb) = (sizes[a] as f64, sizes[b] as f64);
            let pooled = (&scatter[a] + &scatter[b]) / (na + nb - 2.0);
            let chol = match pooled.clone().cholesky() {
                Some(c) => c,
                None if fallback => {
                    shrunk = true;
                    shrink_toward_identity(&pooled, FALLBACK_LAMBDA)
                        .cholesky()
                        .ok_or_else(|| DesignError::Degenerate("pooled covariance is zero".into()))?
                }
                None => {
                    return Err(DesignError::NotPositiveDefinite {
                        eigenvalue: crate::linalg::min_eigenvalue(&pooled),
                    })
                }
            };
            let diff = &means[a] - &means[b];
            let value = na * nb / (na + nb) * diff.dot(&chol.solve(&diff));
            pairs.push((a, b, value));
        }
    }
    let mean = pairs.iter().map(|t| t.2).sum::<f64>() / pairs.len().max(1) as f64;
    Ok(MahalanobisReport { pairs, mean, shrunk })
}

fn require_two_equal(partition: &Partition) -> Result<()> {
    if partition.groups() != 2 {
        return Err(DesignError::Unsupported(format!(
            "closed-form MSEs need L = 2, got {}",
            partition.groups()
        )));
    }
    let sizes = partition.sizes();
    if sizes[0] != sizes[1] {
        return Err(DesignError::Unsupported(format!(
            "closed-form MSEs need equal group sizes, got {sizes:?}"
        )));
    }
    Ok(())
}

fn group_means(values: &[f64], partition: &Partition) -> Vec<f64> {
    let mut sums = vec![0.0; partition.groups()];
    for (v, &g) in values.iter().zip(partition.labels()) {
        sums[g] += v;
    }
    sums.iter().zip(partition.sizes()).map(|(s, n)| s / n as f64).collect()
}

/// `¼ (ū_Aᵀβ − ū_Bᵀβ)² + σ²/N`; group 1 is `A`.
pub fn mse_difference_in_mean(spec: &LinearModelSpec, covariates: &CovariateSet, partition: &Partition) -> Result<f64> {
    spec.validate(covariates.dim())?;
    partition.require_len(covariates.len())?;
    require_two_equal(partition)?;
    let means = group_means(&spec.signal(covariates), partition);
    let bias = means[0] - means[1];
    Ok(0.25 * bias * bias + spec.sigma * spec.sigma / covariates.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeastSquaresMse {
    /// MSE of the treatment-effect estimate.
    pub alpha: f64,
    /// Sum of MSEs over all coefficients including the treatment effect.
    pub sum_theta: f64,
}

/// Exact MSEs of the least-squares estimates under the ±1 treatment coding:
/// `σ² (N − N²/4 · cᵀ(ZᵀZ)⁻¹c)⁻¹` and `σ² tr((XᵀX)⁻¹)`.
pub fn mse_least_squares(
    spec: &LinearModelSpec,
    covariates: &CovariateSet,
    partition: &Partition,
) -> Result<LeastSquaresMse> {
    spec.validate(covariates.dim())?;
    partition.require_len(covariates.len())?;
    require_two_equal(partition)?;
    let n = covariates.len() as f64;
    let z = basis_matrix(&spec.basis, covariates);
    let x = with_treatment_column(&z, partition);
    let xtx = x.transpose() * &x;
    let ztz = z.transpose() * &z;
    let ztz_chol = ztz.cholesky().ok_or_else(|| DesignError::RankDeficient {
        columns: dependent_columns(&z),
    })?;
    let xtx_chol = xtx.cholesky().ok_or_else(|| DesignError::RankDeficient {
        columns: dependent_columns(&x),
    })?;
    let k = z.ncols();
    let c = DVector::from_fn(k, |j, _| {
        let col: Vec<f64> = z.column(j).iter().copied().collect();
        let means = group_means(&col, partition);
        means[0] - means[1]
    });
    let quad = c.dot(&ztz_chol.solve(&c));
    let sigma2 = spec.sigma * spec.sigma;
    let alpha = sigma2 / (n - n * n / 4.0 * quad);
    let sum_theta = sigma2 * xtx_chol.inverse().trace();
    Ok(LeastSquaresMse { alpha, sum_theta })
}

/// `[x | Z]` with `x = +1` for group 1 and `−1` otherwise.
pub fn with_treatment_column(z: &DMatrix<f64>, partition: &Partition) -> DMatrix<f64> {
    let n = z.nrows();
    let mut x = DMatrix::zeros(n, z.ncols() + 1);
    for (i, &g) in partition.labels().iter().enumerate() {
        x[(i, 0)] = if g == 0 { 1.0 } else { -1.0 };
    }
    x.columns_mut(1, z.ncols()).copy_from(z);
    x
}

/// Columns that lie in the span of earlier columns.
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let scale = x.amax().max(1.0);
    let tol = 1e-10 * scale * (x.nrows().max(x.ncols()) as f64);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let mut v = x.column(j).into_owned();
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&v);
                v -= b * proj;
            }
        }
        let norm = v.norm();
        if norm <= tol {
            dependent.push(j);
        } else {
            basis.push(v / norm);
        }
    }
    dependent
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub coefficients: Vec<f64>,
    /// Newton iterations; zero for least squares.
    pub iterations: usize,
    /// Max-norm of the log-likelihood gradient at the solution (logistic).
    pub gradient_norm: f64,
}

impl FitResult {
    pub fn named<'a>(&'a self, names: &'a [String]) -> impl Iterator<Item = (&'a str, f64)> + 'a {
        names.iter().map(String::as_str).zip(self.coefficients.iter().copied())
    }
}

fn check_shape(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(DesignError::DimensionMismatch {
            expected: x.nrows(),
            found: y.len(),
        });
    }
    if x.ncols() > x.nrows() {
        return Err(DesignError::RankDeficient {
            columns: (x.nrows()..x.ncols()).collect(),
        });
    }
    Ok(())
}

/// Least squares via Householder QR.
pub fn fit_ols(x: &DMatrix<f64>, y: &[f64]) -> Result<FitResult> {
    check_shape(x, y)?;
    let dependent = dependent_columns(x);
    if !dependent.is_empty() {
        return Err(DesignError::RankDeficient { columns: dependent });
    }
    let k = x.ncols();
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * DVector::from_column_slice(y);
    let r = qr.r();
    let beta = r
        .solve_upper_triangular(&qty.rows(0, k).into_owned())
        .ok_or_else(|| DesignError::RankDeficient {
            columns: dependent_columns(x),
        })?;
    Ok(FitResult {
        coefficients: beta.iter().copied().collect(),
        iterations: 0,
        gradient_norm: 0.0,
    })
}

pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

const LOGISTIC_TOL: f64 = 1e-8;
const LOGISTIC_MAX_ITERS: usize = 100;
const SEPARATION_NORM: f64 = 1e3;
const SEPARATION_RESIDUAL: f64 = 1e-6;

fn log_likelihood(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(y)
        .map(|(&t, &yi)| {
            // log(1 + e^t) computed stably.
            let softplus = if t > 0.0 {
                t + (-t).exp().ln_1p()
            } else {
                t.exp().ln_1p()
            };
            yi * t - softplus
        })
        .sum()
}

/// Logistic regression MLE by iteratively reweighted least squares.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[f64]) -> Result<FitResult> {
    irls(x, y, LOGISTIC_MAX_ITERS, true)
}

/// Iterate of at most `max_iters` Newton steps, with no separation checks.
///
/// Under separation the MLE does not exist and this returns the large but
/// finite estimate that iteration-capped GLM software reports.
pub fn fit_logistic_capped(x: &DMatrix<f64>, y: &[f64], max_iters: usize) -> Result<FitResult> {
    irls(x, y, max_iters, false)
}

fn irls(x: &DMatrix<f64>, y: &[f64], max_iters: usize, strict: bool) -> Result<FitResult> {
    check_shape(x, y)?;
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(DesignError::InvalidConfig("responses must be 0 or 1".into()));
    }
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if strict && (ones == 0 || ones == y.len()) {
        return Err(DesignError::Separation {
            iterations: 0,
            norm: f64::INFINITY,
        });
    }
    let dependent = dependent_columns(x);
    if !dependent.is_empty() {
        return Err(DesignError::RankDeficient { columns: dependent });
    }
    let k = x.ncols();
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(k);
    let mut ll = log_likelihood(x, y, &beta);
    let mut grad_norm = f64::INFINITY;
    let done = |beta: &DVector<f64>, iterations: usize, gradient_norm: f64| FitResult {
        coefficients: beta.iter().copied().collect(),
        iterations,
        gradient_norm,
    };
    for iter in 0..max_iters {
        let eta = x * &beta;
        let p = eta.map(logistic);
        let grad = x.transpose() * (&yv - &p);
        grad_norm = grad.amax();
        if grad_norm <= LOGISTIC_TOL {
            // A vanishing gradient with every residual vanishing too means the
            // likelihood is still climbing toward a separating direction.
            if strict && (&yv - &p).amax() < SEPARATION_RESIDUAL {
                return Err(DesignError::Separation {
                    iterations: iter,
                    norm: beta.norm(),
                });
            }
            return Ok(done(&beta, iter, grad_norm));
        }
        let w = p.map(|pi| pi * (1.0 - pi));
        let mut xw = x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let hessian = x.transpose() * xw;
        let step = match hessian.cholesky() {
            Some(c) => c.solve(&grad),
            None if strict => {
                return Err(DesignError::Separation {
                    iterations: iter,
                    norm: beta.norm(),
                })
            }
            None => return Ok(done(&beta, iter, grad_norm)),
        };
        // Halve the Newton step until the likelihood does not decrease.
        let mut t = 1.0;
        let mut candidate = &beta + &step;
        let mut cand_ll = log_likelihood(x, y, &candidate);
        while cand_ll < ll && t > 1e-10 {
            t *= 0.5;
            candidate = &beta + &step * t;
            cand_ll = log_likelihood(x, y, &candidate);
        }
        beta = candidate;
        ll = cand_ll;
        if strict && beta.norm() > SEPARATION_NORM {
            return Err(DesignError::Separation {
                iterations: iter + 1,
                norm: beta.norm(),
            });
        }
    }
    if strict {
        return Err(DesignError::NotConverged {
            iterations: max_iters,
            gradient: grad_norm,
        });
    }
    Ok(done(&beta, max_iters, grad_norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiffMode {
    /// `½ (Ȳ_A − Ȳ_B)` for two groups.
    Half,
    /// `Ȳ_l − Ȳ_ref` for every other group, zero-based reference.
    Reference(usize),
}

pub fn diff_in_mean_estimates(responses: &[f64], partition: &Partition, mode: DiffMode) -> Result<Vec<f64>> {
    partition.require_len(responses.len())?;
    let means = group_means(responses, partition);
    match mode {
        DiffMode::Half => {
            if partition.groups() != 2 {
                return Err(DesignError::Unsupported("half-difference estimator needs L = 2".into()));
            }
            Ok(vec![0.5 * (means[0] - means[1])])
        }
        DiffMode::Reference(r) => {
            if r >= partition.groups() {
                return Err(DesignError::InvalidConfig(format!(
                    "reference group {} outside 1..={}",
                    r + 1,
                    partition.groups()
                )));
            }
            Ok((0..partition.groups())
                .filter(|&l| l != r)
                .map(|l| means[l] - means[r])
                .collect())
        }
    }
}

/// `logit π = μ₀ + Σ α_l x_l + βᵀz`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticSpec {
    pub intercept: f64,
    pub treatment_effects: Vec<f64>,
    pub coefficients: Vec<f64>,
}

/// `(1/N) Σ_i logistic(μ₀ + αᵀx + βᵀz_i)` for one treatment encoding `x`.
pub fn marginal_probability(spec: &LogisticSpec, covariates: &CovariateSet, encoding: &[f64]) -> Result<f64> {
    if encoding.len() != spec.treatment_effects.len() {
        return Err(DesignError::DimensionMismatch {
            expected: spec.treatment_effects.len(),
            found: encoding.len(),
        });
    }
    covariates.require_dim(spec.coefficients.len())?;
    if covariates.is_empty() {
        return Err(DesignError::InvalidCovariates("no units".into()));
    }
    let shift: f64 = spec.intercept
        + spec
            .treatment_effects
            .iter()
            .zip(encoding)
            .map(|(a, x)| a * x)
            .sum::<f64>();
    let total: f64 = covariates
        .rows()
        .map(|z| {
            let lin: f64 = spec.coefficients.iter().zip(z).map(|(b, v)| b * v).sum();
            logistic(shift + lin)
        })
        .sum();
    Ok(total / covariates.len() as f64)
}
