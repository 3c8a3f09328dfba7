//! Covariate tables and group partitions.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DesignError, Result};

/// An `N x p` table of unit covariates keyed by stable unit identifiers.
///
/// Values are stored row-major; row `i` belongs to `unit_ids[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSet {
    unit_ids: Vec<String>,
    dim: usize,
    values: Vec<f64>,
}

impl CovariateSet {
    pub fn new(unit_ids: Vec<String>, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(DesignError::InvalidCovariates(
                "at least one covariate column is required".into(),
            ));
        }
        if values.len() != unit_ids.len() * dim {
            return Err(DesignError::InvalidCovariates(format!(
                "{} values do not fill {} rows of {} columns",
                values.len(),
                unit_ids.len(),
                dim
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DesignError::InvalidCovariates(format!(
                "non-finite value for unit {} column {}",
                unit_ids[pos / dim],
                pos % dim + 1
            )));
        }
        let mut seen = HashSet::with_capacity(unit_ids.len());
        for id in &unit_ids {
            if !seen.insert(id.as_str()) {
                return Err(DesignError::InvalidCovariates(format!("duplicate unit id {id:?}")));
            }
        }
        Ok(Self { unit_ids, dim, values })
    }

    /// Builds a set from rows, naming units `u1, u2, ...`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(DesignError::InvalidCovariates("ragged rows".into()));
        }
        let ids = (1..=rows.len()).map(|i| format!("u{i}")).collect();
        Self::new(ids, dim, rows.concat())
    }

    /// Same as [`from_rows`](Self::from_rows) but with ids offset by `start`.
    pub fn from_rows_with_offset(rows: &[Vec<f64>], start: usize) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(DesignError::InvalidCovariates("ragged rows".into()));
        }
        let ids = (0..rows.len()).map(|i| format!("u{}", start + i + 1)).collect();
        Self::new(ids, dim, rows.concat())
    }

    pub fn from_matrix(unit_ids: Vec<String>, m: &DMatrix<f64>) -> Result<Self> {
        let (n, p) = m.shape();
        let mut values = Vec::with_capacity(n * p);
        for i in 0..n {
            values.extend(m.row(i).iter());
        }
        Self::new(unit_ids, p, values)
    }

    /// An empty set with `dim` columns.
    pub fn empty(dim: usize) -> Self {
        Self {
            unit_ids: Vec::new(),
            dim,
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim, &self.values)
    }

    /// Subset of rows, in the order given.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(indices.len());
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            ids.push(self.unit_ids[i].clone());
            values.extend_from_slice(self.row(i));
        }
        Self {
            unit_ids: ids,
            dim: self.dim,
            values,
        }
    }

    /// Appends `other` below `self`; ids must stay unique.
    pub fn concat(&self, other: &CovariateSet) -> Result<Self> {
        if other.dim != self.dim {
            return Err(DesignError::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        let mut ids = self.unit_ids.clone();
        ids.extend(other.unit_ids.iter().cloned());
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Self::new(ids, self.dim, values)
    }

    pub fn require_dim(&self, dim: usize) -> Result<()> {
        if self.dim != dim {
            return Err(DesignError::DimensionMismatch {
                expected: dim,
                found: self.dim,
            });
        }
        Ok(())
    }

    pub fn require_min_units(&self, n: usize) -> Result<()> {
        if self.len() < n {
            return Err(DesignError::InvalidCovariates(format!(
                "need at least {n} units, got {}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Near-equal group sizes `floor(N/L)` / `ceil(N/L)`, larger groups first.
pub fn balanced_sizes(n: usize, groups: usize) -> Vec<usize> {
    if groups == 0 {
        return Vec::new();
    }
    let base = n / groups;
    let extra = n % groups;
    (0..groups).map(|g| base + usize::from(g < extra)).collect()
}

/// Labels with the given group sizes, in group order.
pub(crate) fn labels_from_sizes(sizes: &[usize]) -> Vec<usize> {
    sizes
        .iter()
        .enumerate()
        .flat_map(|(g, &c)| std::iter::repeat_n(g, c))
        .collect()
}

/// Assignment of `N` units to `L` groups. Labels are zero-based internally;
/// file formats and the CLI present them as `1..=L`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    labels: Vec<usize>,
    groups: usize,
}

impl Partition {
    /// Every group `0..groups` must be non-empty.
    pub fn new(labels: Vec<usize>, groups: usize) -> Result<Self> {
        if groups == 0 {
            return Err(DesignError::InvalidPartition("zero groups".into()));
        }
        let mut sizes = vec![0usize; groups];
        for (i, &g) in labels.iter().enumerate() {
            if g >= groups {
                return Err(DesignError::InvalidPartition(format!(
                    "unit {i} has label {g} outside 0..{groups}"
                )));
            }
            sizes[g] += 1;
        }
        if let Some(g) = sizes.iter().position(|&c| c == 0) {
            return Err(DesignError::EmptyGroup { group: g + 1 });
        }
        Ok(Self { labels, groups })
    }

    /// From labels in `1..=groups`.
    pub fn from_one_based(labels: &[usize], groups: usize) -> Result<Self> {
        if labels.contains(&0) {
            return Err(DesignError::InvalidPartition("one-based labels must be >= 1".into()));
        }
        Self::new(labels.iter().map(|&g| g - 1).collect(), groups)
    }

    /// Uniformly random partition with the given group sizes.
    pub fn random_with_sizes<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut labels = labels_from_sizes(sizes);
        labels.shuffle(rng);
        Self::new(labels, sizes.len())
    }

    /// Uniformly random balanced partition of `n` units.
    pub fn random_balanced<R: Rng + ?Sized>(n: usize, groups: usize, rng: &mut R) -> Result<Self> {
        if n < groups {
            return Err(DesignError::InvalidPartition(format!(
                "{n} units cannot fill {groups} groups"
            )));
        }
        Self::random_with_sizes(&balanced_sizes(n, groups), rng)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<usize> {
        self.labels
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.groups];
        for &g in &self.labels {
            sizes[g] += 1;
        }
        sizes
    }

    /// `max N_l - min N_l <= 1`.
    pub fn is_balanced(&self) -> bool {
        let sizes = self.sizes();
        let max = sizes.iter().copied().max().unwrap_or(0);
        let min = sizes.iter().copied().min().unwrap_or(0);
        max - min <= 1
    }

    /// Indices of the units in group `g`.
    pub fn members(&self, g: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == g)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.labels.iter().map(|g| g + 1).collect()
    }

    /// Applies `mapping[old] = new` to every label.
    pub fn relabel(&self, mapping: &[usize]) -> Result<Self> {
        if mapping.len() != self.groups {
            return Err(DesignError::InvalidPartition(
                "relabeling must cover every group".into(),
            ));
        }
        Self::new(self.labels.iter().map(|&g| mapping[g]).collect(), self.groups)
    }

    pub fn require_len(&self, n: usize) -> Result<()> {
        if self.len() != n {
            return Err(DesignError::DimensionMismatch {
                expected: n,
                found: self.len(),
            });
        }
        Ok(())
    }
}
