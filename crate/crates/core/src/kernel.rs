//! Kernel gram matrix and the discrepancy criterion `T_H(g)`.
//!
//! With the Gaussian kernel `K(x) = exp(-xᵀx / 2)` on `R^p`, the pairwise
//! kernel-product integrals have the closed form
//!
//! ```text
//! W(i, j) = π^{p/2} |H|^{-1/2} exp(-¼ (z_i - z_j)ᵀ H⁻¹ (z_i - z_j))
//! ```
//!
//! and the squared `L2` distance between group `l`'s KDE and the pooled KDE
//! reduces to block sums of `W` under the partition:
//!
//! ```text
//! ‖f̂_l − f̂‖² = ((N−N_l)/(N_l N))² ΣW_ll + ΣW_rest,rest / N²
//!             − 2 (N−N_l)/(N_l N²) ΣW_l,rest
//! ```
//!
//! `T_H(g)` is the maximum over groups.
//!
//! Block sums are accumulated in fixed point: every entry is stored as
//! `round(W(i,j)/W(i,i) · 2^48)` and summed in integers, so the sums are
//! exact and independent of summation order. Incremental swap updates
//! ([`SwapCache`]) and online evaluation with frozen units therefore give
//! bit-identical criteria to a from-scratch evaluation.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::bandwidth::BandwidthState;
use crate::data::{CovariateSet, Partition};
use crate::error::{DesignError, Result};
use crate::linalg::{self, quad_form};

/// Default cap on `N` for dense grams.
pub const DEFAULT_MAX_UNITS: usize = 5000;

const FIXED_SHIFT: u32 = 48;
const FIXED_ONE: u64 = 1 << FIXED_SHIFT;
const FIXED_SCALE: f64 = FIXED_ONE as f64;

/// Negative criteria within this fraction of `W(i,i)` are rounding noise.
const CLAMP_TOLERANCE: f64 = 1e-12;

#[inline]
fn quantize(ratio: f64) -> u64 {
    (ratio * FIXED_SCALE).round() as u64
}

/// `π^{p/2} |H|^{-1/2}`, the constant diagonal of `W`.
pub fn gram_diagonal(bandwidth: &BandwidthState) -> f64 {
    let p = bandwidth.dim() as f64;
    (0.5 * p * PI.ln() + bandwidth.log_det_neg_half()).exp()
}

/// Symmetric `N x N` matrix of kernel-product integrals.
///
/// Stored as the diagonal constant times a unit-diagonal ratio matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGram {
    n: usize,
    diag: f64,
    ratio: Vec<f64>,
    bandwidth_tag: u64,
}

impl KernelGram {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn diagonal(&self) -> f64 {
        self.diag
    }

    pub fn bandwidth_tag(&self) -> u64 {
        self.bandwidth_tag
    }

    /// `W(i, j)`.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.diag * self.ratio[i * self.n + j]
    }

    /// `W(i, j) / W(i, i)`.
    pub fn ratio(&self, i: usize, j: usize) -> f64 {
        self.ratio[i * self.n + j]
    }

    #[inline]
    fn fixed(&self, i: usize, j: usize) -> u64 {
        quantize(self.ratio[i * self.n + j])
    }
}

fn check_bandwidth(covariates: &CovariateSet, bandwidth: &BandwidthState) -> Result<()> {
    covariates.require_dim(bandwidth.dim())?;
    linalg::require_spd(bandwidth.inverse())?;
    Ok(())
}

#[inline]
fn kernel_ratio(inv: &[f64], a: &[f64], b: &[f64], buf: &mut [f64]) -> f64 {
    for k in 0..a.len() {
        buf[k] = a[k] - b[k];
    }
    (-0.25 * quad_form(inv, buf)).exp()
}

pub fn compute_gram(covariates: &CovariateSet, bandwidth: &BandwidthState) -> Result<KernelGram> {
    compute_gram_with_cap(covariates, bandwidth, DEFAULT_MAX_UNITS)
}

pub fn compute_gram_with_cap(covariates: &CovariateSet, bandwidth: &BandwidthState, cap: usize) -> Result<KernelGram> {
    check_bandwidth(covariates, bandwidth)?;
    let n = covariates.len();
    if n > cap {
        return Err(DesignError::TooManyUnits { n, cap });
    }
    let inv = linalg::row_major(bandwidth.inverse());
    let p = covariates.dim();
    let mut ratio = vec![0.0; n * n];
    ratio.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        let zi = covariates.row(i);
        let mut buf = vec![0.0; p];
        for (j, slot) in row.iter_mut().enumerate().skip(i + 1) {
            *slot = kernel_ratio(&inv, zi, covariates.row(j), &mut buf);
        }
    });
    for i in 0..n {
        ratio[i * n + i] = 1.0;
        for j in 0..i {
            ratio[i * n + j] = ratio[j * n + i];
        }
    }
    Ok(KernelGram {
        n,
        diag: gram_diagonal(bandwidth),
        ratio,
        bandwidth_tag: bandwidth.tag(),
    })
}

/// Gram over `old ∪ new`, reusing the `old` block of `gram`.
pub fn extend_gram(
    gram: &KernelGram,
    old: &CovariateSet,
    new: &CovariateSet,
    bandwidth: &BandwidthState,
) -> Result<KernelGram> {
    if gram.bandwidth_tag != bandwidth.tag() {
        return Err(DesignError::BandwidthMismatch {
            gram: gram.bandwidth_tag,
            bandwidth: bandwidth.tag(),
        });
    }
    gram_len_matches(gram, old)?;
    if new.is_empty() {
        return Ok(gram.clone());
    }
    if old.is_empty() {
        return compute_gram(new, bandwidth);
    }
    check_bandwidth(new, bandwidth)?;
    old.require_dim(new.dim())?;
    let n_old = old.len();
    let n = n_old + new.len();
    if n > DEFAULT_MAX_UNITS {
        return Err(DesignError::TooManyUnits {
            n,
            cap: DEFAULT_MAX_UNITS,
        });
    }
    let all = old.concat(new)?;
    let inv = linalg::row_major(bandwidth.inverse());
    let p = all.dim();
    let mut ratio = vec![0.0; n * n];
    for i in 0..n_old {
        ratio[i * n..i * n + n_old].copy_from_slice(&gram.ratio[i * n_old..(i + 1) * n_old]);
    }
    let mut buf = vec![0.0; p];
    for i in n_old..n {
        for j in 0..i {
            let r = kernel_ratio(&inv, all.row(j), all.row(i), &mut buf);
            ratio[j * n + i] = r;
            ratio[i * n + j] = r;
        }
        ratio[i * n + i] = 1.0;
    }
    Ok(KernelGram {
        n,
        diag: gram.diag,
        ratio,
        bandwidth_tag: gram.bandwidth_tag,
    })
}

fn gram_len_matches(gram: &KernelGram, covariates: &CovariateSet) -> Result<()> {
    if gram.n != covariates.len() {
        return Err(DesignError::DimensionMismatch {
            expected: gram.n,
            found: covariates.len(),
        });
    }
    Ok(())
}

/// Full `L x L` integer block sums (`ΣW_{s,r}` in units of `W(i,i) / 2^48`).
#[derive(Debug, Clone, PartialEq, Eq)]
struct Blocks {
    groups: usize,
    sums: Vec<i128>,
}

impl Blocks {
    fn zeros(groups: usize) -> Self {
        Self {
            groups,
            sums: vec![0; groups * groups],
        }
    }

    #[inline]
    fn at(&self, s: usize, r: usize) -> i128 {
        self.sums[s * self.groups + r]
    }

    /// Adds a strictly-upper-triangular pair tally in both orientations.
    fn add_half(&mut self, half: &[i128]) {
        let l = self.groups;
        for s in 0..l {
            for r in 0..l {
                self.sums[s * l + r] += half[s * l + r] + half[r * l + s];
            }
        }
    }

    fn add_diagonal(&mut self, counts: &[usize]) {
        for (g, &c) in counts.iter().enumerate() {
            self.sums[g * self.groups + g] += c as i128 * FIXED_ONE as i128;
        }
    }

    /// Unscaled `‖f̂_g − f̂‖² / W(i,i)`, or `+∞` for an empty group.
    fn group_term(&self, g: usize, counts: &[usize], total: i128) -> f64 {
        let l = self.groups;
        let n = counts.iter().sum::<usize>() as i128;
        let ng = counts[g] as i128;
        if ng == 0 {
            return f64::INFINITY;
        }
        let own = self.at(g, g);
        let cross: i128 = (0..l).filter(|&k| k != g).map(|k| self.at(g, k)).sum();
        let rest = total - own - 2 * cross;
        let other = n - ng;
        let num = other * other * own + ng * ng * rest - 2 * ng * other * cross;
        num as f64 / ((ng * ng) as f64 * (n * n) as f64 * FIXED_SCALE)
    }

    fn group_values(&self, counts: &[usize], diag: f64) -> Vec<f64> {
        let total: i128 = self.sums.iter().sum();
        (0..self.groups)
            .map(|g| clamp(self.group_term(g, counts, total)) * diag)
            .collect()
    }

    /// `max_l ‖f̂_l − f̂‖²` given group counts.
    fn criterion(&self, counts: &[usize], diag: f64) -> f64 {
        let total: i128 = self.sums.iter().sum();
        let best = (0..self.groups)
            .map(|g| self.group_term(g, counts, total))
            .fold(f64::NEG_INFINITY, f64::max);
        clamp(best) * diag
    }
}

fn clamp(v: f64) -> f64 {
    debug_assert!(v >= -CLAMP_TOLERANCE, "criterion {v} below rounding noise");
    v.max(0.0)
}

fn validate_labels(labels: &[usize], groups: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; groups];
    for &g in labels {
        if g >= groups {
            return Err(DesignError::InvalidPartition(format!("label {g} outside 0..{groups}")));
        }
        counts[g] += 1;
    }
    Ok(counts)
}

/// Evaluates `T_H` for many candidate labelings of the "free" units, with an
/// optional prefix of frozen units whose labels never change.
///
/// The frozen units are the first `n_frozen` rows of the gram.
#[derive(Debug, Clone)]
pub struct CriterionEngine {
    groups: usize,
    diag: f64,
    n_free: usize,
    frozen_counts: Vec<usize>,
    frozen_blocks: Blocks,
    /// `n_free x L`: sum of fixed-point entries against frozen units per group.
    cross: Vec<u64>,
    /// Strict upper triangle of the free block, packed by rows.
    upper: Vec<u64>,
    /// Start of each packed row in `upper`.
    row_start: Vec<usize>,
    /// Sum of each packed row.
    row_sums: Vec<u64>,
}

impl CriterionEngine {
    /// Engine over all units of `gram`.
    pub fn new(gram: &KernelGram, groups: usize) -> Self {
        Self::build(gram, &[], groups)
    }

    /// Engine whose first `frozen_labels.len()` units keep the given labels.
    pub fn with_frozen(gram: &KernelGram, frozen_labels: &[usize], groups: usize) -> Result<Self> {
        if frozen_labels.len() > gram.n {
            return Err(DesignError::DimensionMismatch {
                expected: gram.n,
                found: frozen_labels.len(),
            });
        }
        validate_labels(frozen_labels, groups)?;
        Ok(Self::build(gram, frozen_labels, groups))
    }

    fn build(gram: &KernelGram, frozen: &[usize], groups: usize) -> Self {
        let m = frozen.len();
        let n_free = gram.n - m;
        let mut frozen_counts = vec![0; groups];
        for &g in frozen {
            frozen_counts[g] += 1;
        }
        let mut half = vec![0i128; groups * groups];
        let mut acc = vec![0u64; groups];
        for i in 0..m {
            acc.iter_mut().for_each(|a| *a = 0);
            for j in (i + 1)..m {
                acc[frozen[j]] += gram.fixed(i, j);
            }
            for (g, &a) in acc.iter().enumerate() {
                half[frozen[i] * groups + g] += a as i128;
            }
        }
        let mut frozen_blocks = Blocks::zeros(groups);
        frozen_blocks.add_half(&half);
        frozen_blocks.add_diagonal(&frozen_counts);

        let mut cross = vec![0u64; n_free * groups];
        for f in 0..n_free {
            let i = m + f;
            for (j, &g) in frozen.iter().enumerate() {
                cross[f * groups + g] += gram.fixed(i, j);
            }
        }
        let mut upper = Vec::with_capacity(n_free * n_free.saturating_sub(1) / 2);
        let mut row_start = Vec::with_capacity(n_free);
        let mut row_sums = Vec::with_capacity(n_free);
        for a in 0..n_free {
            row_start.push(upper.len());
            let before = upper.len();
            upper.extend(((a + 1)..n_free).map(|b| gram.fixed(m + a, m + b)));
            row_sums.push(upper[before..].iter().sum());
        }
        Self {
            groups,
            diag: gram.diag,
            n_free,
            frozen_counts,
            frozen_blocks,
            cross,
            upper,
            row_start,
            row_sums,
        }
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn n_free(&self) -> usize {
        self.n_free
    }

    pub fn frozen_counts(&self) -> &[usize] {
        &self.frozen_counts
    }

    fn blocks(&self, labels: &[usize]) -> (Blocks, Vec<usize>) {
        let l = self.groups;
        let m = self.n_free;
        let mut counts = self.frozen_counts.clone();
        for &g in labels {
            counts[g] += 1;
        }
        // Per-group masks make the inner loop a branch-free and-add.
        let masks: Vec<Vec<u64>> = (0..l)
            .map(|g| labels.iter().map(|&x| if x == g { u64::MAX } else { 0 }).collect())
            .collect();
        let mut half = vec![0i128; l * l];
        for i in 0..m {
            let row = &self.upper[self.row_start[i]..self.row_start[i] + (m - i - 1)];
            let gi = labels[i];
            let mut tallied = 0u64;
            for g in 0..l - 1 {
                let mask = &masks[g][i + 1..];
                let s: u64 = row.iter().zip(mask).map(|(w, k)| w & k).sum();
                half[gi * l + g] += s as i128;
                tallied += s;
            }
            half[gi * l + l - 1] += (self.row_sums[i] - tallied) as i128;
        }
        let mut blocks = self.frozen_blocks.clone();
        blocks.add_half(&half);
        let mut own = vec![0usize; l];
        for &g in labels {
            own[g] += 1;
        }
        blocks.add_diagonal(&own);
        if !self.cross.is_empty() {
            let mut cross_blocks = vec![0i128; l * l];
            for (f, &r) in labels.iter().enumerate() {
                for s in 0..l {
                    cross_blocks[s * l + r] += self.cross[f * l + s] as i128;
                }
            }
            blocks.add_half(&cross_blocks);
        }
        (blocks, counts)
    }

    /// `T_H` for the given free-unit labels. Labels must lie in `0..L`;
    /// an empty group overall yields `+∞`.
    pub fn evaluate(&self, labels: &[usize]) -> f64 {
        assert_eq!(labels.len(), self.n_free, "label vector length");
        let (blocks, counts) = self.blocks(labels);
        blocks.criterion(&counts, self.diag)
    }

    /// Per-group values `‖f̂_l − f̂‖²`.
    pub fn group_values(&self, labels: &[usize]) -> Vec<f64> {
        assert_eq!(labels.len(), self.n_free, "label vector length");
        let (blocks, counts) = self.blocks(labels);
        blocks.group_values(&counts, self.diag)
    }
}

/// `T_H(g)`.
pub fn criterion(gram: &KernelGram, partition: &Partition) -> Result<f64> {
    partition.require_len(gram.n)?;
    Ok(CriterionEngine::new(gram, partition.groups()).evaluate(partition.labels()))
}

/// `T_H(g)` without materialising the gram; for `N` beyond the dense cap.
pub fn criterion_streaming(
    covariates: &CovariateSet,
    partition: &Partition,
    bandwidth: &BandwidthState,
) -> Result<f64> {
    check_bandwidth(covariates, bandwidth)?;
    partition.require_len(covariates.len())?;
    let l = partition.groups();
    let labels = partition.labels();
    let inv = linalg::row_major(bandwidth.inverse());
    let n = covariates.len();
    let p = covariates.dim();
    let half = (0..n)
        .into_par_iter()
        .fold(
            || (vec![0i128; l * l], vec![0.0; p], vec![0u128; l]),
            |(mut half, mut buf, mut acc), i| {
                acc.iter_mut().for_each(|a| *a = 0);
                let zi = covariates.row(i);
                for j in (i + 1)..n {
                    let r = kernel_ratio(&inv, zi, covariates.row(j), &mut buf);
                    acc[labels[j]] += quantize(r) as u128;
                }
                for (g, &a) in acc.iter().enumerate() {
                    half[labels[i] * l + g] += a as i128;
                }
                (half, buf, acc)
            },
        )
        .map(|(h, _, _)| h)
        .reduce(
            || vec![0i128; l * l],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let mut blocks = Blocks::zeros(l);
    blocks.add_half(&half);
    let counts = partition.sizes();
    blocks.add_diagonal(&counts);
    Ok(blocks.criterion(&counts, gram_diagonal(bandwidth)))
}

/// Cached row/block sums for a full partition, supporting O(L²) queries of
/// the criterion after swapping two units between groups.
#[derive(Debug, Clone)]
pub struct SwapCache {
    labels: Vec<usize>,
    counts: Vec<usize>,
    /// `N x L`: `Σ_{j ∈ g} W(k, j)` in fixed point.
    rows: Vec<i64>,
    blocks: Blocks,
    diag: f64,
}

impl SwapCache {
    pub fn new(gram: &KernelGram, partition: &Partition) -> Result<Self> {
        partition.require_len(gram.n)?;
        let l = partition.groups();
        let n = gram.n;
        let labels = partition.labels().to_vec();
        let mut rows = vec![0i64; n * l];
        for k in 0..n {
            for (j, &g) in labels.iter().enumerate() {
                rows[k * l + g] += gram.fixed(k, j) as i64;
            }
        }
        let mut blocks = Blocks::zeros(l);
        for (k, &g) in labels.iter().enumerate() {
            for r in 0..l {
                blocks.sums[g * l + r] += rows[k * l + r] as i128;
            }
        }
        Ok(Self {
            labels,
            counts: partition.sizes(),
            rows,
            blocks,
            diag: gram.diag,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn criterion(&self) -> f64 {
        self.blocks.criterion(&self.counts, self.diag)
    }

    fn swapped_blocks(&self, gram: &KernelGram, i: usize, j: usize) -> Result<Blocks> {
        let l = self.blocks.groups;
        if i >= self.labels.len() || j >= self.labels.len() {
            return Err(DesignError::InvalidPartition("swap index out of range".into()));
        }
        let (a, b) = (self.labels[i], self.labels[j]);
        if a == b {
            return Err(DesignError::InvalidPartition(format!(
                "units {i} and {j} are both in group {}",
                a + 1
            )));
        }
        // B' = B + u vᵀ + v uᵀ + (dᵀ W d) v vᵀ with u = R_i − R_j, v = e_b − e_a.
        let u: Vec<i128> = (0..l)
            .map(|g| self.rows[i * l + g] as i128 - self.rows[j * l + g] as i128)
            .collect();
        let mut v = vec![0i128; l];
        v[b] = 1;
        v[a] = -1;
        let dwd = 2 * FIXED_ONE as i128 - 2 * gram.fixed(i, j) as i128;
        let mut out = self.blocks.clone();
        for s in 0..l {
            for r in 0..l {
                out.sums[s * l + r] += u[s] * v[r] + v[s] * u[r] + dwd * v[s] * v[r];
            }
        }
        Ok(out)
    }

    /// Criterion after swapping units `i` and `j`, leaving the cache unchanged.
    pub fn swap_criterion(&self, gram: &KernelGram, i: usize, j: usize) -> Result<f64> {
        Ok(self.swapped_blocks(gram, i, j)?.criterion(&self.counts, self.diag))
    }

    /// Commits the swap of units `i` and `j`.
    pub fn apply_swap(&mut self, gram: &KernelGram, i: usize, j: usize) -> Result<()> {
        self.blocks = self.swapped_blocks(gram, i, j)?;
        let l = self.blocks.groups;
        let (a, b) = (self.labels[i], self.labels[j]);
        for k in 0..self.labels.len() {
            let delta = gram.fixed(k, j) as i64 - gram.fixed(k, i) as i64;
            self.rows[k * l + a] += delta;
            self.rows[k * l + b] -= delta;
        }
        self.labels.swap(i, j);
        Ok(())
    }
}

/// Criterion of `partition` after swapping `swap.0` and `swap.1`, using a
/// cache built for exactly `partition`.
pub fn criterion_delta(
    gram: &KernelGram,
    partition: &Partition,
    cache: &SwapCache,
    swap: (usize, usize),
) -> Result<f64> {
    if cache.labels != partition.labels() {
        return Err(DesignError::InvalidPartition(
            "swap cache does not match the partition".into(),
        ));
    }
    cache.swap_criterion(gram, swap.0, swap.1)
}

/// KDE at `point`: `(1/n) |H|^{-1/2} Σ K(H^{-1/2}(z − z_i))`.
///
/// With `normalized`, the kernel carries the `(2π)^{-p/2}` factor so the
/// estimate integrates to one; otherwise it matches the gram's convention.
pub fn kde_eval(subset: &CovariateSet, bandwidth: &BandwidthState, point: &[f64], normalized: bool) -> Result<f64> {
    if subset.is_empty() {
        return Err(DesignError::InvalidCovariates("empty KDE sample".into()));
    }
    subset.require_dim(bandwidth.dim())?;
    if point.len() != subset.dim() {
        return Err(DesignError::DimensionMismatch {
            expected: subset.dim(),
            found: point.len(),
        });
    }
    let inv = linalg::row_major(bandwidth.inverse());
    Ok(kde_sum(subset.rows(), &inv, point) / subset.len() as f64 * kde_scale(bandwidth, normalized))
}

fn kde_scale(bandwidth: &BandwidthState, normalized: bool) -> f64 {
    let mut scale = bandwidth.log_det_neg_half().exp();
    if normalized {
        scale *= (2.0 * PI).powf(-0.5 * bandwidth.dim() as f64);
    }
    scale
}

fn kde_sum<'a>(rows: impl Iterator<Item = &'a [f64]>, inv: &[f64], point: &[f64]) -> f64 {
    let mut buf = vec![0.0; point.len()];
    rows.map(|z| {
        for k in 0..point.len() {
            buf[k] = point[k] - z[k];
        }
        (-0.5 * quad_form(inv, &buf)).exp()
    })
    .sum()
}

/// Tensor grid for [`criterion_by_quadrature`].
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub points_per_dim: usize,
    /// Padding beyond the data range, in bandwidth standard deviations.
    pub padding_sd: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points_per_dim: 801,
            padding_sd: 6.0,
        }
    }
}

/// `max_l ∫ (f̂_l − f̂)²` by the trapezoid rule on a tensor grid (`p ≤ 2`).
pub fn criterion_by_quadrature(
    covariates: &CovariateSet,
    partition: &Partition,
    bandwidth: &BandwidthState,
    grid: GridSpec,
) -> Result<f64> {
    check_bandwidth(covariates, bandwidth)?;
    partition.require_len(covariates.len())?;
    let p = covariates.dim();
    if p > 2 {
        return Err(DesignError::Unsupported(format!(
            "quadrature criterion supports p <= 2, got {p}"
        )));
    }
    if grid.points_per_dim < 3 {
        return Err(DesignError::InvalidConfig("grid needs at least 3 points".into()));
    }
    let l = partition.groups();
    let n = covariates.len();
    let sizes = partition.sizes();
    let axes: Vec<(f64, f64)> = (0..p)
        .map(|k| {
            let sd = bandwidth.matrix()[(k, k)].sqrt();
            let (lo, hi) = covariates
                .rows()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                    (lo.min(r[k]), hi.max(r[k]))
                });
            let lo = lo - grid.padding_sd * sd;
            let hi = hi + grid.padding_sd * sd;
            (lo, (hi - lo) / (grid.points_per_dim - 1) as f64)
        })
        .collect();
    let m = grid.points_per_dim;
    let total_points = m.pow(p as u32);
    let inv = linalg::row_major(bandwidth.inverse());
    let scale = kde_scale(bandwidth, false);
    let labels = partition.labels();

    let sums = (0..total_points)
        .into_par_iter()
        .fold(
            || vec![0.0f64; l],
            |mut acc, idx| {
                let mut point = [0.0; 2];
                let mut weight = 1.0;
                let mut rem = idx;
                for (k, &(lo, step)) in axes.iter().enumerate() {
                    let t = rem % m;
                    rem /= m;
                    point[k] = lo + step * t as f64;
                    weight *= step * if t == 0 || t == m - 1 { 0.5 } else { 1.0 };
                }
                let point = &point[..p];
                let mut group = vec![0.0; l];
                let mut buf = [0.0; 2];
                for i in 0..n {
                    let z = covariates.row(i);
                    for k in 0..p {
                        buf[k] = point[k] - z[k];
                    }
                    group[labels[i]] += (-0.5 * quad_form(&inv, &buf[..p])).exp();
                }
                let pooled = group.iter().sum::<f64>() / n as f64;
                for g in 0..l {
                    let d = (group[g] / sizes[g] as f64 - pooled) * scale;
                    acc[g] += weight * d * d;
                }
                acc
            },
        )
        .reduce(
            || vec![0.0; l],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    Ok(sums.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(values: &[f64]) -> CovariateSet {
        CovariateSet::from_rows(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap()
    }

    fn random_set(n: usize, p: usize, rng: &mut ChaCha8Rng) -> CovariateSet {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        CovariateSet::from_rows(&rows).unwrap()
    }

    #[test]
    fn unit_bandwidth_diagonal_is_sqrt_pi() {
        let h = BandwidthState::isotropic(1, 1.0).unwrap();
        let gram = compute_gram(&line(&[0.3, -1.0, 4.0]), &h).unwrap();
        for i in 0..3 {
            assert_relative_eq!(gram.entry(i, i), 1.772_453_850_905_516, epsilon = 1e-15);
        }
    }

    #[test]
    fn closed_form_off_diagonal() {
        let h = BandwidthState::isotropic(1, 1.0).unwrap();
        let gram = compute_gram(&line(&[0.0, 2.0, 0.0]), &h).unwrap();
        assert_relative_eq!(gram.entry(0, 1), PI.sqrt() * (-1.0f64).exp(), epsilon = 1e-15);
        assert_eq!(gram.entry(0, 2), gram.entry(0, 0));
        assert_eq!(gram.entry(1, 0), gram.entry(0, 1));
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let h = BandwidthState::isotropic(2, 1.0).unwrap();
        assert!(matches!(
            compute_gram(&line(&[0.0, 1.0]), &h),
            Err(DesignError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn identical_pair_has_zero_criterion() {
        let h = BandwidthState::isotropic(1, 1.0).unwrap();
        let gram = compute_gram(&line(&[1.5, 1.5]), &h).unwrap();
        let g = Partition::new(vec![0, 1], 2).unwrap();
        assert_eq!(criterion(&gram, &g).unwrap(), 0.0);
    }

    #[test]
    fn alternating_split_is_optimal_on_a_grid() {
        let h = BandwidthState::isotropic(1, 1.0).unwrap();
        let gram = compute_gram(&line(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]), &h).unwrap();
        let alt = criterion(&gram, &Partition::new(vec![0, 1, 0, 1, 0, 1], 2).unwrap()).unwrap();
        let mut values = Vec::new();
        for mask in 0u32..64 {
            if mask.count_ones() != 3 || mask & 1 == 0 {
                continue;
            }
            let labels = (0..6).map(|i| usize::from(mask >> i & 1 == 0)).collect();
            values.push(criterion(&gram, &Partition::new(labels, 2).unwrap()).unwrap());
        }
        assert_eq!(values.len(), 10);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(alt, min);
        // Independent dense evaluation of ¼ dᵀ W d for the alternating split.
        let d = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0].map(|v: f64| v / 3.0);
        let mut direct = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                direct += d[i] * d[j] * gram.entry(i, j);
            }
        }
        assert_relative_eq!(alt, 0.25 * direct, epsilon = 1e-13);
        assert_relative_eq!(alt, 0.029_148_692_795_284, epsilon = 1e-12);
    }

    #[test]
    fn relabeling_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_set(15, 2, &mut rng);
        let h = BandwidthState::from_data(&data, None).unwrap();
        let gram = compute_gram(&data, &h).unwrap();
        let g = Partition::random_balanced(15, 3, &mut rng).unwrap();
        let base = criterion(&gram, &g).unwrap();
        for perm in [[1, 2, 0], [2, 0, 1], [0, 2, 1]] {
            assert_eq!(criterion(&gram, &g.relabel(&perm).unwrap()).unwrap(), base);
        }
    }

    #[test]
    fn swap_cache_matches_full_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = random_set(20, 3, &mut rng);
        let h = BandwidthState::from_data(&data, None).unwrap();
        let gram = compute_gram(&data, &h).unwrap();
        let mut g = Partition::random_balanced(20, 3, &mut rng).unwrap();
        let mut cache = SwapCache::new(&gram, &g).unwrap();
        assert_eq!(cache.criterion(), criterion(&gram, &g).unwrap());
        for _ in 0..100 {
            let (i, j) = loop {
                let i = rng.random_range(0..20);
                let j = rng.random_range(0..20);
                if g.labels()[i] != g.labels()[j] {
                    break (i, j);
                }
            };
            let predicted = criterion_delta(&gram, &g, &cache, (i, j)).unwrap();
            let mut labels = g.labels().to_vec();
            labels.swap(i, j);
            let next = Partition::new(labels, 3).unwrap();
            assert_eq!(predicted, criterion(&gram, &next).unwrap());
            cache.apply_swap(&gram, i, j).unwrap();
            g = next;
            assert_eq!(cache.criterion(), predicted);
        }
    }

    #[test]
    fn swap_and_back_restores_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_set(10, 1, &mut rng);
        let h = BandwidthState::from_data(&data, None).unwrap();
        let gram = compute_gram(&data, &h).unwrap();
        let g = Partition::random_balanced(10, 2, &mut rng).unwrap();
        let mut cache = SwapCache::new(&gram, &g).unwrap();
        let before = cache.criterion();
        let i = g.members(0)[0];
        let j = g.members(1)[0];
        cache.apply_swap(&gram, i, j).unwrap();
        cache.apply_swap(&gram, i, j).unwrap();
        assert_eq!(cache.criterion(), before);
        assert_eq!(cache.labels(), g.labels());
    }

    #[test]
    fn swap_rejects_same_group_and_stale_cache() {
        let data = line(&[0.0, 1.0, 2.0, 3.0]);
        let h = BandwidthState::isotropic(1, 1.0).unwrap();
        let gram = compute_gram(&data, &h).unwrap();
        let g = Partition::new(vec![0, 0, 1, 1], 2).unwrap();
        let cache = SwapCache::new(&gram, &g).unwrap();
        assert!(criterion_delta(&gram, &g, &cache, (0, 1)).is_err());
        let other = Partition::new(vec![0, 1, 0, 1], 2).unwrap();
        assert!(criterion_delta(&gram, &other, &cache, (0, 1)).is_err());
    }

    #[test]
    fn singleton_groups_with_identical_covariates() {
        let data = line(&[2.0, 2.0, 0.0, 1.0]);
        let h = BandwidthState::isotropic(1, 1.0).unwrap();
        let gram = compute_gram(&data, &h).unwrap();
        let g = Partition::new(vec![0, 1, 2, 2], 3).unwrap();
        let cache = SwapCache::new(&gram, &g).unwrap();
        assert_eq!(cache.swap_criterion(&gram, 0, 1).unwrap(), cache.criterion());
    }

    #[test]
    fn frozen_engine_matches_full_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = random_set(30, 2, &mut rng);
        let h = BandwidthState::from_data(&data, None).unwrap();
        let gram = compute_gram(&data, &h).unwrap();
        let g = Partition::random_balanced(30, 3, &mut rng).unwrap();
        let frozen = &g.labels()[..18];
        let engine = CriterionEngine::with_frozen(&gram, frozen, 3).unwrap();
        assert_eq!(engine.evaluate(&g.labels()[18..]), criterion(&gram, &g).unwrap());
    }

    #[test]
    fn streaming_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = random_set(40, 2, &mut rng);
        let h = BandwidthState::from_data(&data, None).unwrap();
        let gram = compute_gram(&data, &h).unwrap();
        let g = Partition::random_balanced(40, 2, &mut rng).unwrap();
        assert_eq!(
            criterion_streaming(&data, &g, &h).unwrap(),
            criterion(&gram, &g).unwrap()
        );
    }

    #[test]
    fn extend_matches_full_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = random_set(8, 2, &mut rng);
        let h = BandwidthState::from_data(&data, None).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let old = data.select(&idx[..5]);
        let new = data.select(&idx[5..]);
        let partial = compute_gram(&old, &h).unwrap();
        let extended = extend_gram(&partial, &old, &new, &h).unwrap();
        assert_eq!(extended, compute_gram(&data, &h).unwrap());
        assert_eq!(
            extend_gram(&partial, &old, &CovariateSet::empty(2), &h).unwrap(),
            partial
        );
        let other = BandwidthState::isotropic(2, 3.0).unwrap();
        assert!(matches!(
            extend_gram(&partial, &old, &new, &other),
            Err(DesignError::BandwidthMismatch { .. })
        ));
    }

    #[test]
    fn extend_from_empty_is_compute() {
        let data = line(&[0.0, 0.5, 3.0]);
        let h = BandwidthState::isotropic(1, 0.7).unwrap();
        let empty = CovariateSet::empty(1);
        let base = compute_gram(&empty, &h).unwrap();
        assert_eq!(
            extend_gram(&base, &empty, &data, &h).unwrap(),
            compute_gram(&data, &h).unwrap()
        );
    }

    #[test]
    fn kde_single_point_and_tails() {
        let h = BandwidthState::isotropic(1, 1.0).unwrap();
        let one = line(&[0.7]);
        assert_relative_eq!(
            kde_eval(&one, &h, &[0.7], true).unwrap(),
            0.398_942_280_401_432_7,
            epsilon = 1e-15
        );
        assert_eq!(kde_eval(&one, &h, &[0.7], false).unwrap(), 1.0);
        assert!(kde_eval(&one, &h, &[60.0], true).unwrap() < 1e-300);
        assert!(kde_eval(&CovariateSet::empty(1), &h, &[0.0], true).is_err());
    }

    #[test]
    fn normalized_kde_integrates_to_one() {
        let data = line(&[-1.0, 0.0, 2.5, 3.0]);
        let h = BandwidthState::isotropic(1, 0.5).unwrap();
        let (lo, hi, m) = (-12.0, 15.0, 4001);
        let step = (hi - lo) / (m - 1) as f64;
        let integral: f64 = (0..m)
            .map(|t| {
                let w = if t == 0 || t == m - 1 { 0.5 } else { 1.0 };
                w * step * kde_eval(&data, &h, &[lo + step * t as f64], true).unwrap()
            })
            .sum();
        assert_relative_eq!(integral, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn quadrature_rejects_high_dimension() {
        let data = CovariateSet::from_rows(&[vec![0.0; 3], vec![1.0; 3]]).unwrap();
        let h = BandwidthState::isotropic(3, 1.0).unwrap();
        let g = Partition::new(vec![0, 1], 2).unwrap();
        assert!(matches!(
            criterion_by_quadrature(&data, &g, &h, GridSpec::default()),
            Err(DesignError::Unsupported(_))
        ));
    }

    #[test]
    fn quadrature_zero_for_duplicated_rows() {
        let data = line(&[0.0, 0.0, 1.0, 1.0, -2.0, -2.0]);
        let h = BandwidthState::isotropic(1, 0.8).unwrap();
        let g = Partition::new(vec![0, 1, 1, 0, 0, 1], 2).unwrap();
        let q = criterion_by_quadrature(&data, &g, &h, GridSpec::default()).unwrap();
        assert!(q < 1e-8);
    }
}
