//! Elitist genetic algorithm over balanced partitions.
//!
//! Each generation keeps the `mE` fittest partitions, then fills the rest of
//! the population with pairs of children: two tournament-selected parents,
//! ordered crossover on the permutation encoding, and a swap mutation applied
//! to every child.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{balanced_sizes, labels_from_sizes, Partition};
use crate::error::{DesignError, Result};
use crate::kernel::{CriterionEngine, KernelGram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population: usize,
    pub elites: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Target group sizes; balanced split when `None`.
    pub sizes: Option<Vec<usize>>,
    /// Stop after this many generations without improvement.
    pub stall_window: Option<usize>,
    /// Accept `sizes` that differ by more than one.
    pub allow_unbalanced: bool,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 100,
            elites: 20,
            max_iters: 300,
            seed: 0,
            sizes: None,
            stall_window: None,
            allow_unbalanced: false,
        }
    }
}

impl GaConfig {
    /// Defaults with `I_max` grown as `300·sqrt(N/500)` beyond 500 units.
    pub fn scaled_for(n: usize) -> Self {
        let mut config = Self::default();
        if n > 500 {
            config.max_iters = (300.0 * (n as f64 / 500.0).sqrt()).round() as usize;
        }
        config
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(DesignError::InvalidConfig(
                "population must hold at least 2 partitions".into(),
            ));
        }
        if self.elites >= self.population {
            return Err(DesignError::InvalidConfig(format!(
                "elites ({}) must be fewer than the population ({})",
                self.elites, self.population
            )));
        }
        if !(self.population - self.elites).is_multiple_of(2) {
            return Err(DesignError::InvalidConfig(format!(
                "population minus elites must be even, got {} - {}",
                self.population, self.elites
            )));
        }
        if self.stall_window == Some(0) {
            return Err(DesignError::InvalidConfig("stall window must be positive".into()));
        }
        Ok(())
    }

    /// Validated group sizes for `n` units in `groups` groups.
    pub fn group_sizes(&self, n: usize, groups: usize) -> Result<Vec<usize>> {
        if groups == 0 || n < groups {
            return Err(DesignError::InvalidConfig(format!(
                "{n} units cannot fill {groups} groups"
            )));
        }
        let sizes = match &self.sizes {
            None => return Ok(balanced_sizes(n, groups)),
            Some(s) => s.clone(),
        };
        if sizes.len() != groups {
            return Err(DesignError::InvalidConfig(format!(
                "{} group sizes given for {groups} groups",
                sizes.len()
            )));
        }
        if sizes.iter().sum::<usize>() != n {
            return Err(DesignError::InvalidConfig(format!(
                "group sizes sum to {}, expected {n}",
                sizes.iter().sum::<usize>()
            )));
        }
        if sizes.contains(&0) {
            return Err(DesignError::InvalidConfig("group sizes must be positive".into()));
        }
        let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
        if spread > 1 && !self.allow_unbalanced {
            return Err(DesignError::InvalidConfig(format!(
                "group sizes {sizes:?} are unbalanced"
            )));
        }
        Ok(sizes)
    }
}

/// Partitions with their cached criterion values.
#[derive(Debug, Clone)]
pub struct Population {
    pub members: Vec<Partition>,
    pub fitness: Vec<f64>,
}

impl Population {
    pub fn new(members: Vec<Partition>, fitness: Vec<f64>) -> Result<Self> {
        if members.is_empty() || members.len() != fitness.len() {
            return Err(DesignError::InvalidConfig(
                "population needs one fitness value per member".into(),
            ));
        }
        Ok(Self { members, fitness })
    }

    pub fn best(&self) -> (&Partition, f64) {
        let i = argmin(&self.fitness);
        (&self.members[i], self.fitness[i])
    }
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Binary tournament: index of the fitter of two members drawn with
/// replacement; ties go to either with equal probability.
pub fn tournament<R: Rng + ?Sized>(fitness: &[f64], rng: &mut R) -> usize {
    let i = rng.random_range(0..fitness.len());
    let j = rng.random_range(0..fitness.len());
    if fitness[i] < fitness[j] {
        i
    } else if fitness[j] < fitness[i] {
        j
    } else if rng.random_bool(0.5) {
        i
    } else {
        j
    }
}

pub fn select_parent<'a, R: Rng + ?Sized>(population: &'a Population, rng: &mut R) -> &'a Partition {
    &population.members[tournament(&population.fitness, rng)]
}

/// Group-1 units first, then group 2, and so on; order within a group is
/// shuffled.
fn encode<R: Rng + ?Sized>(labels: &[usize], groups: usize, rng: &mut R) -> Vec<usize> {
    let mut perm = Vec::with_capacity(labels.len());
    for g in 0..groups {
        let start = perm.len();
        perm.extend(labels.iter().enumerate().filter(|&(_, &l)| l == g).map(|(i, _)| i));
        perm[start..].shuffle(rng);
    }
    perm
}

fn decode(perm: &[usize], sizes: &[usize]) -> Vec<usize> {
    let mut labels = vec![0; perm.len()];
    let mut pos = 0;
    for (g, &size) in sizes.iter().enumerate() {
        for &unit in &perm[pos..pos + size] {
            labels[unit] = g;
        }
        pos += size;
    }
    labels
}

/// Takes `prefix[..cut]`, then `suffix[cut..]` with any unit already in the
/// prefix replaced, left to right, by the missing units in random order.
fn exchange<R: Rng + ?Sized>(prefix: &[usize], suffix: &[usize], cut: usize, rng: &mut R) -> Vec<usize> {
    let n = prefix.len();
    let mut used = vec![false; n];
    let mut child: Vec<usize> = prefix[..cut].to_vec();
    for &u in &child {
        used[u] = true;
    }
    let mut in_suffix = vec![false; n];
    for &u in &suffix[cut..] {
        in_suffix[u] = true;
    }
    let mut missing: Vec<usize> = (0..n).filter(|&u| !used[u] && !in_suffix[u]).collect();
    missing.shuffle(rng);
    let mut fill = missing.into_iter();
    for &u in &suffix[cut..] {
        if used[u] {
            child.push(fill.next().expect("every duplicate has a missing partner"));
        } else {
            child.push(u);
        }
    }
    child
}

/// Ordered crossover on explicit permutations at prefix length `cut`.
///
/// Child `a` is `p_b[..cut]` followed by the repaired tail of `p_a`, and
/// symmetrically for child `b`.
pub fn crossover_permutations<R: Rng + ?Sized>(
    pa: &[usize],
    pb: &[usize],
    cut: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = pa.len();
    if pb.len() != n || cut > n {
        return Err(DesignError::InvalidPartition(
            "crossover parents differ in length or cut is out of range".into(),
        ));
    }
    for perm in [pa, pb] {
        let mut seen = vec![false; n];
        for &u in perm {
            if u >= n || std::mem::replace(&mut seen[u], true) {
                return Err(DesignError::InvalidPartition(
                    "crossover parent is not a permutation".into(),
                ));
            }
        }
    }
    Ok((exchange(pb, pa, cut, rng), exchange(pa, pb, cut, rng)))
}

fn crossover_labels<R: Rng + ?Sized>(
    a: &[usize],
    b: &[usize],
    sizes: &[usize],
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let n = a.len();
    if n < 3 {
        return (a.to_vec(), b.to_vec());
    }
    let pa = encode(a, sizes.len(), rng);
    let pb = encode(b, sizes.len(), rng);
    let cut = rng.random_range(2..n);
    let ca = exchange(&pb, &pa, cut, rng);
    let cb = exchange(&pa, &pb, cut, rng);
    (decode(&ca, sizes), decode(&cb, sizes))
}

pub fn crossover<R: Rng + ?Sized>(
    parent_a: &Partition,
    parent_b: &Partition,
    rng: &mut R,
) -> Result<(Partition, Partition)> {
    if parent_a.len() != parent_b.len()
        || parent_a.groups() != parent_b.groups()
        || parent_a.sizes() != parent_b.sizes()
    {
        return Err(DesignError::InvalidPartition(
            "crossover parents must share N, L and group sizes".into(),
        ));
    }
    let sizes = parent_a.sizes();
    let (a, b) = crossover_labels(parent_a.labels(), parent_b.labels(), &sizes, rng);
    Ok((
        Partition::new(a, parent_a.groups())?,
        Partition::new(b, parent_a.groups())?,
    ))
}

/// Swaps a random unit of a random group with a random unit of another
/// random group. Returns the swapped pair, or `None` if fewer than two
/// groups are occupied.
fn mutate_labels<R: Rng + ?Sized>(labels: &mut [usize], groups: usize, rng: &mut R) -> Option<(usize, usize)> {
    let mut members = vec![Vec::new(); groups];
    for (i, &g) in labels.iter().enumerate() {
        members[g].push(i);
    }
    let occupied: Vec<usize> = (0..groups).filter(|&g| !members[g].is_empty()).collect();
    if occupied.len() < 2 {
        return None;
    }
    let a = rng.random_range(0..occupied.len());
    let mut b = rng.random_range(0..occupied.len() - 1);
    if b >= a {
        b += 1;
    }
    let ma = &members[occupied[a]];
    let mb = &members[occupied[b]];
    let i = ma[rng.random_range(0..ma.len())];
    let j = mb[rng.random_range(0..mb.len())];
    labels.swap(i, j);
    Some((i, j))
}

pub fn mutate<R: Rng + ?Sized>(child: &Partition, rng: &mut R) -> Partition {
    let mut labels = child.labels().to_vec();
    mutate_labels(&mut labels, child.groups(), rng);
    Partition::new(labels, child.groups()).expect("swap preserves group sizes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaResult {
    pub partition: Partition,
    pub value: f64,
    /// Best fitness so far: entry 0 is the initial population, entry `k`
    /// follows generation `k`.
    pub trace: Vec<f64>,
}

/// Minimizes `T_H` over partitions of all units of `gram`.
pub fn optimize(gram: &KernelGram, groups: usize, config: &GaConfig) -> Result<GaResult> {
    optimize_seeded(gram, groups, config, &[])
}

/// Like [`optimize`], with `initial` partitions placed in the first
/// population ahead of the random members.
pub fn optimize_seeded(gram: &KernelGram, groups: usize, config: &GaConfig, initial: &[Partition]) -> Result<GaResult> {
    config.validate()?;
    let n = gram.len();
    let sizes = config.group_sizes(n, groups)?;
    for p in initial {
        p.require_len(n)?;
        if p.groups() != groups || p.sizes() != sizes {
            return Err(DesignError::InvalidPartition(
                "seed partition does not match the configured group sizes".into(),
            ));
        }
    }
    let engine = CriterionEngine::new(gram, groups);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let seeds: Vec<Vec<usize>> = initial.iter().map(|p| p.labels().to_vec()).collect();
    let (labels, value, trace) = evolve(&engine, &sizes, config, &seeds, &mut rng);
    Ok(GaResult {
        partition: Partition::new(labels, groups)?,
        value,
        trace,
    })
}

/// Core loop over labelings of the engine's free units with fixed `sizes`
/// (per-group counts among the free units; zeros allowed).
pub(crate) fn evolve<R: Rng + ?Sized>(
    engine: &CriterionEngine,
    sizes: &[usize],
    config: &GaConfig,
    seeds: &[Vec<usize>],
    rng: &mut R,
) -> (Vec<usize>, f64, Vec<f64>) {
    let m = config.population;
    let template = labels_from_sizes(sizes);
    let mut members: Vec<Vec<usize>> = seeds.iter().take(m).cloned().collect();
    while members.len() < m {
        let mut labels = template.clone();
        labels.shuffle(rng);
        members.push(labels);
    }
    let mut fitness = evaluate_all(engine, &members);
    let mut best = argmin(&fitness);
    let mut best_labels = members[best].clone();
    let mut best_value = fitness[best];
    let mut trace = vec![best_value];
    let mut stall = 0;

    for _ in 0..config.max_iters {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]));
        let mut next: Vec<Vec<usize>> = Vec::with_capacity(m);
        let mut next_fitness: Vec<f64> = Vec::with_capacity(m);
        for &i in order.iter().take(config.elites) {
            next.push(members[i].clone());
            next_fitness.push(fitness[i]);
        }
        let mut children = Vec::with_capacity(m - config.elites);
        while next.len() + children.len() < m {
            let a = tournament(&fitness, rng);
            let b = tournament(&fitness, rng);
            let (mut ca, mut cb) = crossover_labels(&members[a], &members[b], sizes, rng);
            mutate_labels(&mut ca, sizes.len(), rng);
            mutate_labels(&mut cb, sizes.len(), rng);
            children.push(ca);
            children.push(cb);
        }
        next_fitness.extend(evaluate_all(engine, &children));
        next.extend(children);
        members = next;
        fitness = next_fitness;

        best = argmin(&fitness);
        if fitness[best] < best_value {
            best_value = fitness[best];
            best_labels = members[best].clone();
            stall = 0;
        } else {
            stall += 1;
        }
        trace.push(best_value);
        if config.stall_window.is_some_and(|w| stall >= w) {
            break;
        }
    }
    (best_labels, best_value, trace)
}

fn evaluate_all(engine: &CriterionEngine, members: &[Vec<usize>]) -> Vec<f64> {
    members.par_iter().map(|l| engine.evaluate(l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandwidth::BandwidthState;
    use crate::data::CovariateSet;
    use crate::kernel::{compute_gram, criterion};

    #[test]
    fn config_validation() {
        assert!(GaConfig::default().validate().is_ok());
        let odd = GaConfig {
            population: 10,
            elites: 3,
            ..GaConfig::default()
        };
        assert!(odd.validate().is_err());
        let all_elite = GaConfig {
            population: 10,
            elites: 10,
            ..GaConfig::default()
        };
        assert!(all_elite.validate().is_err());
        let uneven = GaConfig {
            sizes: Some(vec![5, 2]),
            ..GaConfig::default()
        };
        assert!(uneven.group_sizes(7, 2).is_err());
        assert_eq!(GaConfig::scaled_for(2000).max_iters, 600);
        assert_eq!(GaConfig::scaled_for(200).max_iters, 300);
    }

    #[test]
    fn tournament_picks_fitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // The worse member wins only when drawn twice.
        let worse = (0..10_000).filter(|_| tournament(&[0.3, 0.5], &mut rng) == 1).count();
        assert!((2_300..2_700).contains(&worse), "{worse}");
        let pop = Population::new(
            vec![
                Partition::new(vec![0, 1], 2).unwrap(),
                Partition::new(vec![1, 0], 2).unwrap(),
            ],
            vec![0.3, 0.5],
        )
        .unwrap();
        let (best, value) = pop.best();
        assert_eq!((best.labels(), value), (&[0, 1][..], 0.3));
    }

    #[test]
    fn identical_parents_keep_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Partition::new(vec![0, 1, 2, 0, 1, 2, 0, 1], 3).unwrap();
        for _ in 0..50 {
            let (a, b) = crossover(&p, &p, &mut rng).unwrap();
            assert_eq!(a, p);
            assert_eq!(b, p);
        }
    }

    #[test]
    fn crossover_rejects_mismatched_parents() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Partition::new(vec![0, 1, 0, 1], 2).unwrap();
        let b = Partition::new(vec![0, 1, 1, 1], 2).unwrap();
        assert!(crossover(&a, &b, &mut rng).is_err());
    }

    #[test]
    fn two_unit_mutation_swaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Partition::new(vec![0, 1], 2).unwrap();
        assert_eq!(mutate(&p, &mut rng).labels(), &[1, 0]);
    }

    #[test]
    fn trivial_pair_has_zero_criterion() {
        let data = CovariateSet::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let h = BandwidthState::isotropic(1, 1.0).unwrap();
        let gram = compute_gram(&data, &h).unwrap();
        let config = GaConfig {
            population: 4,
            elites: 2,
            max_iters: 3,
            ..GaConfig::default()
        };
        let result = optimize(&gram, 2, &config).unwrap();
        assert_eq!(result.value, 0.0);
        assert!(result.partition.is_balanced());
    }

    #[test]
    fn result_value_matches_criterion_and_is_deterministic() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![((i * 7) % 11) as f64, i as f64 * 0.1]).collect();
        let data = CovariateSet::from_rows(&rows).unwrap();
        let h = BandwidthState::from_data(&data, None).unwrap();
        let gram = compute_gram(&data, &h).unwrap();
        let config = GaConfig {
            population: 20,
            elites: 4,
            max_iters: 30,
            seed: 9,
            ..GaConfig::default()
        };
        let a = optimize(&gram, 3, &config).unwrap();
        let b = optimize(&gram, 3, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.value, criterion(&gram, &a.partition).unwrap());
        assert!(a.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(a.trace.len(), 31);
        assert_eq!(*a.trace.last().unwrap(), a.value);
    }

    #[test]
    fn stall_window_stops_early() {
        let data = CovariateSet::from_rows(&[vec![0.0], vec![0.0], vec![0.0], vec![0.0]]).unwrap();
        let h = BandwidthState::isotropic(1, 1.0).unwrap();
        let gram = compute_gram(&data, &h).unwrap();
        let config = GaConfig {
            population: 6,
            elites: 2,
            max_iters: 100,
            stall_window: Some(5),
            ..GaConfig::default()
        };
        assert_eq!(optimize(&gram, 2, &config).unwrap().trace.len(), 6);
    }
}
