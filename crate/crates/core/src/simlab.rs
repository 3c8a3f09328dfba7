//! Synthetic scenarios comparing randomized and discrepancy designs.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::BandwidthState;
use crate::data::{CovariateSet, Partition};
use crate::error::{DesignError, Result};
use crate::ga::{optimize_seeded, GaConfig};
use crate::kernel::{compute_gram, criterion};
use crate::metrics::{
    diff_in_mean_estimates, extended_basis, fit_logistic, fit_logistic_capped, linear_basis, logistic,
    mahalanobis_balance, marginal_probability, mse_difference_in_mean, mse_least_squares, treatment_encoding, DiffMode,
    LinearModelSpec, LogisticSpec,
};
use crate::online::{init_online, random_batch_labels, BalanceMode, OnlineConfig};
use crate::reduce::{fit_pca, transform, PcaTarget};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const METHOD_RANDOMIZED: &str = "randomized";
pub const METHOD_DISCREPANCY: &str = "discrepancy";

/// `Q Λ Qᵀ` with `Q` Haar-random orthogonal and `Λ_ii ~ U(λ_L, λ_U)`.
pub fn random_pd_matrix<R: Rng + ?Sized>(k: usize, lower: f64, upper: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if k == 0 || lower.is_nan() || lower <= 0.0 || upper.is_nan() || upper < lower || !upper.is_finite() {
        return Err(DesignError::InvalidConfig(format!(
            "eigenvalue bounds need 0 < lower <= upper, got [{lower}, {upper}] for k = {k}"
        )));
    }
    let g = DMatrix::<f64>::from_fn(k, k, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let eig: DVector<f64> = if lower == upper {
        DVector::from_element(k, lower)
    } else {
        let u = Uniform::new(lower, upper).expect("bounds checked");
        DVector::from_fn(k, |_, _| u.sample(rng))
    };
    let mut m = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    crate::linalg::symmetrize(&mut m);
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Case1,
    Case2,
    Logistic,
    Highdim,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Case1, Scenario::Case2, Scenario::Logistic, Scenario::Highdim];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Case1 => "case1",
            Scenario::Case2 => "case2",
            Scenario::Logistic => "logistic",
            Scenario::Highdim => "highdim",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Scenario::Case1 | Scenario::Case2 => 5,
            Scenario::Logistic => 4,
            Scenario::Highdim => HIGHDIM_BLOCKS * HIGHDIM_BLOCK_SIZE,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = DesignError;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL.into_iter().find(|sc| sc.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Scenario::ALL.iter().map(|s| s.name()).collect();
            DesignError::InvalidConfig(format!("unknown scenario {s:?}; valid names: {}", names.join(", ")))
        })
    }
}

const HIGHDIM_BLOCKS: usize = 6;
const HIGHDIM_BLOCK_SIZE: usize = 8;
const HIGHDIM_RHO: f64 = 0.6;

/// Eigenvalue range for the random `(z1, z2)` covariance.
pub const DEFAULT_EIGEN_BOUNDS: (f64, f64) = (1.0, 3.0);

/// Exactly `round(w·n)` draws from `a`, the rest from `b`, in random order.
fn mixture<R: Rng + ?Sized>(
    n: usize,
    weight: f64,
    rng: &mut R,
    mut a: impl FnMut(&mut R) -> f64,
    mut b: impl FnMut(&mut R) -> f64,
) -> Vec<f64> {
    let na = (weight * n as f64).round() as usize;
    let mut from_a: Vec<bool> = (0..n).map(|i| i < na).collect();
    from_a.shuffle(rng);
    from_a
        .iter()
        .map(|&first| if first { a(rng) } else { b(rng) })
        .collect()
}

fn normal<R: Rng + ?Sized>(mean: f64, sd: f64) -> impl FnMut(&mut R) -> f64 {
    move |rng: &mut R| mean + sd * Distribution::<f64>::sample(&StandardNormal, rng)
}

fn uniform<R: Rng + ?Sized>(lo: f64, hi: f64) -> impl FnMut(&mut R) -> f64 {
    let u = Uniform::new(lo, hi).expect("valid bounds");
    move |rng: &mut R| u.sample(rng)
}

fn gamma<R: Rng + ?Sized>(shape: f64, scale: f64) -> impl FnMut(&mut R) -> f64 {
    let g = Gamma::new(shape, scale).expect("valid gamma parameters");
    move |rng: &mut R| g.sample(rng)
}

/// `(z1, z2)` from `0.7 N(−3·1, Σ) + 0.3 N(5·1, Σ)`.
fn normal_pair<R: Rng + ?Sized>(n: usize, sigma: &DMatrix<f64>, rng: &mut R) -> Vec<[f64; 2]> {
    let l = sigma.clone().cholesky().expect("random PD matrix").l();
    let na = (0.7 * n as f64).round() as usize;
    let mut first: Vec<bool> = (0..n).map(|i| i < na).collect();
    first.shuffle(rng);
    first
        .iter()
        .map(|&f| {
            let mu = if f { -3.0 } else { 5.0 };
            let e: [f64; 2] = [StandardNormal.sample(rng), StandardNormal.sample(rng)];
            [mu + l[(0, 0)] * e[0], mu + l[(1, 0)] * e[0] + l[(1, 1)] * e[1]]
        })
        .collect()
}

pub fn gen_covariates<R: Rng + ?Sized>(scenario: Scenario, n: usize, rng: &mut R) -> Result<CovariateSet> {
    gen_covariates_with(scenario, n, DEFAULT_EIGEN_BOUNDS, rng)
}

pub fn gen_covariates_with<R: Rng + ?Sized>(
    scenario: Scenario,
    n: usize,
    eigen_bounds: (f64, f64),
    rng: &mut R,
) -> Result<CovariateSet> {
    let p = scenario.dim();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(p);
    match scenario {
        Scenario::Case1 | Scenario::Case2 | Scenario::Logistic => {
            let sigma = random_pd_matrix(2, eigen_bounds.0, eigen_bounds.1, rng)?;
            let pair = normal_pair(n, &sigma, rng);
            columns.push(pair.iter().map(|z| z[0]).collect());
            columns.push(pair.iter().map(|z| z[1]).collect());
            columns.push(mixture(n, 0.4, rng, uniform(-0.5, 1.5), uniform(-3.0, 8.0)));
            columns.push(mixture(n, 0.2, rng, gamma(0.1, 1.0), gamma(2.5, 1.0)));
            if scenario != Scenario::Logistic {
                columns.push(mixture(n, 0.3, rng, normal(0.05, 1.0), normal(10.0, 1.0)));
            }
        }
        Scenario::Highdim => {
            // Equicorrelated blocks: z = sqrt(ρ) f + sqrt(1 − ρ) e within a block.
            let (a, b) = (HIGHDIM_RHO.sqrt(), (1.0 - HIGHDIM_RHO).sqrt());
            columns = vec![Vec::with_capacity(n); p];
            for _ in 0..n {
                for block in 0..HIGHDIM_BLOCKS {
                    let f: f64 = StandardNormal.sample(rng);
                    for k in 0..HIGHDIM_BLOCK_SIZE {
                        let e: f64 = StandardNormal.sample(rng);
                        columns[block * HIGHDIM_BLOCK_SIZE + k].push(a * f + b * e);
                    }
                }
            }
        }
    }
    let mut values = Vec::with_capacity(n * p);
    for i in 0..n {
        values.extend(columns.iter().map(|c| c[i]));
    }
    CovariateSet::new((1..=n).map(|i| format!("u{i}")).collect(), p, values)
}

/// `2s + N(0, 0.1)` with `s` uniform on `{1, −1}`.
pub fn draw_coefficient<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    2.0 * s + 0.1f64.sqrt() * Distribution::<f64>::sample(&StandardNormal, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ResponseModel {
    Linear(LinearModelSpec),
    Logistic(LogisticSpec),
}

/// Responses for units with zero-based `treatments` out of `L`.
pub fn gen_response<R: Rng + ?Sized>(
    model: &ResponseModel,
    covariates: &CovariateSet,
    treatments: &[usize],
    groups: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let noise = draw_noise(model, covariates.len(), rng);
    gen_response_with_noise(model, covariates, treatments, groups, &noise)
}

/// Per-unit noise for [`gen_response_with_noise`]: standard normal errors for
/// linear models, uniforms on `[0, 1)` for logistic ones.
pub fn draw_noise<R: Rng + ?Sized>(model: &ResponseModel, n: usize, rng: &mut R) -> Vec<f64> {
    match model {
        ResponseModel::Linear(_) => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        ResponseModel::Logistic(_) => (0..n).map(|_| rng.random::<f64>()).collect(),
    }
}

/// Responses from given noise, so that several designs can share one draw.
pub fn gen_response_with_noise(
    model: &ResponseModel,
    covariates: &CovariateSet,
    treatments: &[usize],
    groups: usize,
    noise: &[f64],
) -> Result<Vec<f64>> {
    if noise.len() != covariates.len() {
        return Err(DesignError::DimensionMismatch {
            expected: covariates.len(),
            found: noise.len(),
        });
    }
    if treatments.len() != covariates.len() {
        return Err(DesignError::DimensionMismatch {
            expected: covariates.len(),
            found: treatments.len(),
        });
    }
    if treatments.iter().any(|&t| t >= groups) {
        return Err(DesignError::InvalidPartition("treatment outside 0..L".into()));
    }
    let effect = |alpha: &[f64], t: usize| -> Result<f64> {
        if alpha.len() != groups - 1 {
            return Err(DesignError::InvalidConfig(format!(
                "{} treatment effects for {groups} groups",
                alpha.len()
            )));
        }
        Ok(alpha
            .iter()
            .zip(treatment_encoding(groups, t))
            .map(|(a, x)| a * x)
            .sum())
    };
    match model {
        ResponseModel::Linear(spec) => {
            spec.validate(covariates.dim())?;
            let signal = spec.signal(covariates);
            signal
                .iter()
                .zip(treatments)
                .zip(noise)
                .map(|((s, &t), e)| Ok(s + effect(&spec.treatment_effects, t)? + spec.sigma * e))
                .collect()
        }
        ResponseModel::Logistic(spec) => {
            covariates.require_dim(spec.coefficients.len())?;
            covariates
                .rows()
                .zip(treatments)
                .zip(noise)
                .map(|((z, &t), &u)| {
                    let lin: f64 = spec.coefficients.iter().zip(z).map(|(b, v)| b * v).sum();
                    let pi = logistic(spec.intercept + effect(&spec.treatment_effects, t)? + lin);
                    Ok(if u < pi { 1.0 } else { 0.0 })
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnlineOptions {
    pub initial: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub groups: usize,
    pub n: usize,
    pub replicates: usize,
    pub sigma: f64,
    pub treatment_effect: f64,
    pub ga: GaConfig,
    pub online: Option<OnlineOptions>,
    pub seed: u64,
    pub eigen_bounds: (f64, f64),
    /// Variance fraction for the PCA step of the high-dimensional scenario.
    pub pca_variance: f64,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, groups: usize, n: usize) -> Self {
        Self {
            scenario,
            groups,
            n,
            replicates: 30,
            sigma: 1.0,
            treatment_effect: 2.0,
            ga: GaConfig::scaled_for(n),
            online: None,
            seed: 0,
            eigen_bounds: DEFAULT_EIGEN_BOUNDS,
            pca_variance: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ga.validate()?;
        if self.replicates == 0 {
            return Err(DesignError::InvalidConfig("replicates must be at least 1".into()));
        }
        if self.groups < 2 {
            return Err(DesignError::InvalidConfig("at least 2 groups are required".into()));
        }
        if self.n < 2 * self.groups {
            return Err(DesignError::InvalidConfig(format!(
                "N = {} is too small for {} groups of at least 2 units",
                self.n, self.groups
            )));
        }
        if self.ga.sizes.is_some() {
            return Err(DesignError::InvalidConfig(
                "simulations always use the balanced split".into(),
            ));
        }
        if let Some(o) = self.online {
            if o.initial < 2 * self.groups || o.initial >= self.n || o.batch == 0 {
                return Err(DesignError::InvalidConfig(format!(
                    "online run needs 2L <= N0 < N and a positive batch size, got N0 = {}, batch = {}",
                    o.initial, o.batch
                )));
            }
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(DesignError::InvalidConfig("sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Metric names reported for this configuration.
    pub fn metrics(&self) -> Vec<&'static str> {
        match (self.scenario, self.groups) {
            (Scenario::Case1 | Scenario::Case2, 2) => vec!["th", "mse_dim", "mse_ls", "mahalanobis"],
            (Scenario::Logistic, _) => vec!["th", "abs_err_dim", "sqerr_glm", "mahalanobis"],
            _ => vec!["th", "mahalanobis"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    /// method → metric → value.
    pub values: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    /// Quartiles by linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Summary {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Summary {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub config: ScenarioConfig,
    pub replicates: Vec<ReplicateResult>,
}

impl Report {
    pub fn values(&self, method: &str, metric: &str) -> Vec<f64> {
        self.replicates
            .iter()
            .filter_map(|r| r.values.get(method).and_then(|m| m.get(metric)).copied())
            .collect()
    }

    pub fn summary(&self) -> BTreeMap<String, BTreeMap<String, Summary>> {
        let mut out: BTreeMap<String, BTreeMap<String, Summary>> = BTreeMap::new();
        for method in [METHOD_RANDOMIZED, METHOD_DISCREPANCY] {
            for metric in self.config.metrics() {
                let v = self.values(method, metric);
                if !v.is_empty() {
                    out.entry(method.into())
                        .or_default()
                        .insert(metric.into(), Summary::of(&v));
                }
            }
        }
        out
    }

    pub fn median(&self, method: &str, metric: &str) -> f64 {
        Summary::of(&self.values(method, metric)).median
    }

    /// One row per replicate × method × metric.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["replicate", "method", "metric", "value"])
            .map_err(csv_error)?;
        for r in &self.replicates {
            for (method, metrics) in &r.values {
                for (metric, value) in metrics {
                    w.write_record([
                        (r.replicate + 1).to_string(),
                        method.clone(),
                        metric.clone(),
                        format!("{value:e}"),
                    ])
                    .map_err(csv_error)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Config echo plus per-method, per-metric summaries.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema_version: u32,
            config: &'a ScenarioConfig,
            summary: BTreeMap<String, BTreeMap<String, Summary>>,
        }
        Ok(serde_json::to_string_pretty(&Doc {
            schema_version: self.schema_version,
            config: &self.config,
            summary: self.summary(),
        })?)
    }
}

fn csv_error(e: csv::Error) -> DesignError {
    DesignError::Io(std::io::Error::other(e))
}

/// RNG for one replicate, independent of every other replicate.
pub fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64 + 1);
    rng
}

pub fn run_comparison(config: &ScenarioConfig) -> Result<Report> {
    config.validate()?;
    let replicates = (0..config.replicates)
        .into_par_iter()
        .map(|r| run_replicate(config, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        replicates,
    })
}

fn true_model<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Option<ResponseModel> {
    let alpha = vec![config.treatment_effect; config.groups - 1];
    let linear = |basis: Vec<crate::metrics::BasisTerm>, rng: &mut R| {
        let coefficients = (0..basis.len()).map(|_| draw_coefficient(rng)).collect();
        ResponseModel::Linear(LinearModelSpec {
            basis,
            coefficients,
            treatment_effects: alpha.clone(),
            sigma: config.sigma,
        })
    };
    match config.scenario {
        Scenario::Case1 => Some(linear(linear_basis(5), rng)),
        Scenario::Case2 => Some(linear(extended_basis(), rng)),
        Scenario::Logistic => Some(ResponseModel::Logistic(LogisticSpec {
            intercept: draw_coefficient(rng),
            treatment_effects: alpha.clone(),
            coefficients: (0..4).map(|_| draw_coefficient(rng)).collect(),
        })),
        Scenario::Highdim => None,
    }
}

/// Covariates the criterion sees: PCA scores for the high-dimensional scenario.
fn design_space(config: &ScenarioConfig, covariates: &CovariateSet) -> Result<CovariateSet> {
    if config.scenario == Scenario::Highdim {
        let pca = fit_pca(covariates, PcaTarget::VarianceFraction(config.pca_variance))?;
        transform(&pca, covariates)
    } else {
        Ok(covariates.clone())
    }
}

pub fn run_replicate(config: &ScenarioConfig, replicate: usize) -> Result<ReplicateResult> {
    let mut rng = replicate_rng(config.seed, replicate);
    let covariates = gen_covariates_with(config.scenario, config.n, config.eigen_bounds, &mut rng)?;
    let model = true_model(config, &mut rng);
    let l = config.groups;
    let ga = config.ga.clone().with_seed(rng.random());

    let (randomized, discrepancy) = match config.online {
        None => {
            let random = Partition::random_balanced(config.n, l, &mut rng)?;
            let space = design_space(config, &covariates)?;
            let bw = BandwidthState::from_data(&space, None)?;
            let gram = compute_gram(&space, &bw)?;
            // The randomized design seeds the GA, so the result can only improve on it.
            let designed = optimize_seeded(&gram, l, &ga, std::slice::from_ref(&random))?;
            (random, designed.partition)
        }
        Some(o) => online_pair(config, &covariates, o, ga, &mut rng)?,
    };

    let space = design_space(config, &covariates)?;
    let bw = BandwidthState::from_data(&space, None)?;
    let gram = compute_gram(&space, &bw)?;
    // Both designs see the same response noise.
    let noise = model.as_ref().map(|m| draw_noise(m, config.n, &mut rng));
    let mut values = BTreeMap::new();
    for (name, partition) in [(METHOD_RANDOMIZED, &randomized), (METHOD_DISCREPANCY, &discrepancy)] {
        let mut treatments: Vec<usize> = (0..l).collect();
        treatments.shuffle(&mut rng);
        let m = evaluate_design(
            config,
            &covariates,
            &gram,
            partition,
            &treatments,
            model.as_ref(),
            noise.as_deref(),
        )?;
        values.insert(name.to_string(), m);
    }
    Ok(ReplicateResult { replicate, values })
}

fn online_pair(
    config: &ScenarioConfig,
    covariates: &CovariateSet,
    options: OnlineOptions,
    ga: GaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Partition, Partition)> {
    let l = config.groups;
    let idx: Vec<usize> = (0..config.n).collect();
    let first = covariates.select(&idx[..options.initial]);
    let pca = (config.scenario == Scenario::Highdim).then_some(PcaTarget::VarianceFraction(config.pca_variance));
    let online = OnlineConfig {
        ga,
        pca,
        ..OnlineConfig::default()
    };
    let mut state = init_online(&first, l, online)?;
    let mut random = Partition::random_balanced(options.initial, l, rng)?.into_labels();
    let mut start = options.initial;
    while start < config.n {
        let end = (start + options.batch).min(config.n);
        let batch = covariates.select(&idx[start..end]);
        let mut sizes = vec![0; l];
        for &g in &random {
            sizes[g] += 1;
        }
        random.extend(random_batch_labels(&sizes, end - start, BalanceMode::Strict, rng));
        state = state.assign_batch(&batch)?.0;
        start = end;
    }
    Ok((Partition::new(random, l)?, state.partition()?))
}

fn evaluate_design(
    config: &ScenarioConfig,
    covariates: &CovariateSet,
    gram: &crate::kernel::KernelGram,
    partition: &Partition,
    group_to_treatment: &[usize],
    model: Option<&ResponseModel>,
    noise: Option<&[f64]>,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    out.insert("th".to_string(), criterion(gram, partition)?);
    out.insert(
        "mahalanobis".to_string(),
        mahalanobis_balance(covariates, partition)?.mean,
    );
    match model {
        Some(ResponseModel::Linear(spec)) if config.groups == 2 => {
            out.insert("mse_dim".into(), mse_difference_in_mean(spec, covariates, partition)?);
            out.insert("mse_ls".into(), mse_least_squares(spec, covariates, partition)?.alpha);
        }
        Some(model @ ResponseModel::Logistic(spec)) => {
            let noise = noise.expect("noise is drawn for every response model");
            let (abs_err, sq_err) =
                logistic_errors(config, covariates, partition, group_to_treatment, model, spec, noise)?;
            out.insert("abs_err_dim".into(), abs_err);
            out.insert("sqerr_glm".into(), sq_err);
        }
        _ => {}
    }
    Ok(out)
}

/// Newton iterations allowed when the responses are separated.
pub const GLM_MAX_ITERS: usize = 25;

fn logistic_errors(
    config: &ScenarioConfig,
    covariates: &CovariateSet,
    partition: &Partition,
    group_to_treatment: &[usize],
    model: &ResponseModel,
    spec: &LogisticSpec,
    noise: &[f64],
) -> Result<(f64, f64)> {
    let l = config.groups;
    let treatments: Vec<usize> = partition.labels().iter().map(|&g| group_to_treatment[g]).collect();
    let treated = Partition::new(treatments.clone(), l)?;
    let pi: Vec<f64> = (0..l)
        .map(|t| marginal_probability(spec, covariates, &treatment_encoding(l, t)))
        .collect::<Result<_>>()?;
    let theta: Vec<f64> = (0..l - 1).map(|t| pi[t] - pi[l - 1]).collect();

    let n = covariates.len();
    let p = covariates.dim();
    let x = DMatrix::from_fn(n, l + p, |i, j| match j {
        0 => 1.0,
        j if j < l => treatment_encoding(l, treatments[i])[j - 1],
        j => covariates.row(i)[j - l],
    });
    let y = gen_response_with_noise(model, covariates, &treatments, l, noise)?;
    // Separated responses have no finite MLE; score the capped iterate instead.
    let fit = match fit_logistic(&x, &y) {
        Err(DesignError::Separation { .. } | DesignError::NotConverged { .. }) => {
            fit_logistic_capped(&x, &y, GLM_MAX_ITERS)?
        }
        other => other?,
    };
    let est = diff_in_mean_estimates(&y, &treated, DiffMode::Reference(l - 1))?;
    let abs_err = est.iter().zip(&theta).map(|(e, t)| (e - t).abs()).sum();
    let sq_err = fit.coefficients[1..l]
        .iter()
        .zip(&spec.treatment_effects)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((abs_err, sq_err))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_pd_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_pd_matrix(1, 2.0, 2.0, &mut rng).unwrap();
        assert!((m[(0, 0)] - 2.0).abs() < 1e-15);
        assert!(random_pd_matrix(3, 0.0, 1.0, &mut rng).is_err());
        assert!(random_pd_matrix(3, 2.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        let err = "case9".parse::<Scenario>().unwrap_err().to_string();
        assert!(err.contains("case1, case2, logistic, highdim"), "{err}");
    }

    #[test]
    fn zero_noise_responses_are_pure_effects() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = gen_covariates(Scenario::Case1, 10, &mut rng).unwrap();
        let model = ResponseModel::Linear(LinearModelSpec {
            basis: linear_basis(5),
            coefficients: vec![0.0; 6],
            treatment_effects: vec![2.0],
            sigma: 0.0,
        });
        let t: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let y = gen_response(&model, &data, &t, 2, &mut rng).unwrap();
        for (yi, ti) in y.iter().zip(&t) {
            assert_eq!(*yi, if *ti == 0 { 2.0 } else { -2.0 });
        }
    }

    #[test]
    fn saturated_logistic_is_all_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = gen_covariates(Scenario::Logistic, 50, &mut rng).unwrap();
        let model = ResponseModel::Logistic(LogisticSpec {
            intercept: -1e4,
            treatment_effects: vec![2.0],
            coefficients: vec![1.0; 4],
        });
        let t = vec![0; 50];
        assert!(gen_response(&model, &data, &t, 2, &mut rng)
            .unwrap()
            .iter()
            .all(|&y| y == 0.0));
    }

    #[test]
    fn quartiles_interpolate() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!(
            (s.min, s.q1, s.median, s.q3, s.max, s.mean),
            (1.0, 2.0, 3.0, 4.0, 5.0, 3.0)
        );
        assert_eq!(Summary::of(&[1.0, 2.0]).median, 1.5);
    }

    #[test]
    fn config_rejects_bad_combinations() {
        let mut c = ScenarioConfig::new(Scenario::Case1, 2, 20);
        c.replicates = 0;
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::new(Scenario::Case1, 2, 20);
        c.online = Some(OnlineOptions { initial: 30, batch: 5 });
        assert!(c.validate().is_err());
        assert_eq!(
            ScenarioConfig::new(Scenario::Case1, 3, 30).metrics(),
            vec!["th", "mahalanobis"]
        );
    }

    #[test]
    fn small_comparison_is_reproducible() {
        let mut c = ScenarioConfig::new(Scenario::Case2, 2, 24);
        c.replicates = 2;
        c.ga = GaConfig {
            population: 10,
            elites: 2,
            max_iters: 10,
            ..GaConfig::default()
        };
        let a = run_comparison(&c).unwrap();
        let b = run_comparison(&c).unwrap();
        assert_eq!(a, b);
        for r in &a.replicates {
            assert!(r.values[METHOD_DISCREPANCY]["th"] <= r.values[METHOD_RANDOMIZED]["th"]);
            assert_eq!(r.values[METHOD_RANDOMIZED].len(), 4);
        }
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 2 * 4);
        assert!(text.starts_with("replicate,method,metric,value\n"));
    }
}
