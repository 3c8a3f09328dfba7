//! Batch-by-batch assignment with past assignments frozen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bandwidth::BandwidthState;
use crate::data::{balanced_sizes, CovariateSet, Partition};
use crate::error::{DesignError, Result};
use crate::ga::{evolve, GaConfig};
use crate::kernel::{compute_gram, criterion, extend_gram, CriterionEngine, KernelGram};
use crate::reduce::{fit_pca, transform, update_pca, PcaState, PcaTarget};

pub const STATE_FORMAT: &str = "abdesign-online-state";
pub const STATE_VERSION: u32 = 1;

/// Constraint on how many new units each group may receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BalanceMode {
    /// Cumulative group sizes stay within one of each other.
    #[default]
    Strict,
    /// Only each batch is split near-equally.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub ga: GaConfig,
    pub balance: BalanceMode,
    /// Keep `H` from the first batch and extend the gram incrementally.
    pub freeze_bandwidth: bool,
    pub pca: Option<PcaTarget>,
    pub lambda_override: Option<f64>,
    /// Batches at most this large are always searched exhaustively.
    pub exhaustive_batch: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            ga: GaConfig::default(),
            balance: BalanceMode::Strict,
            freeze_bandwidth: false,
            pca: None,
            lambda_override: None,
            exhaustive_batch: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub unit_id: String,
    /// Zero-based group.
    pub group: usize,
    /// Zero-based treatment.
    pub treatment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngPosition {
    seed: String,
    stream: u64,
    /// `u128` does not fit a JSON number.
    word_pos: String,
}

impl RngPosition {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| DesignError::State(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| DesignError::State("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| DesignError::State(format!("rng position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone)]
pub struct OnlineState {
    units: CovariateSet,
    labels: Vec<usize>,
    groups: usize,
    group_to_treatment: Vec<usize>,
    bandwidth: BandwidthState,
    pca: Option<PcaState>,
    config: OnlineConfig,
    batches: usize,
    rng: ChaCha8Rng,
    /// Gram over `units`, kept only with a frozen bandwidth.
    gram: Option<KernelGram>,
}

/// Serialized form of [`OnlineState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateBody {
    units: CovariateSet,
    labels: Vec<usize>,
    groups: usize,
    group_to_treatment: Vec<usize>,
    bandwidth: BandwidthState,
    pca: Option<PcaState>,
    config: OnlineConfig,
    batches: usize,
    rng: RngPosition,
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    checksum: String,
    body: StateBody,
}

pub fn init_online(first_batch: &CovariateSet, groups: usize, config: OnlineConfig) -> Result<OnlineState> {
    config.ga.validate()?;
    if groups == 0 || first_batch.len() < groups {
        return Err(DesignError::InvalidCovariates(format!(
            "first batch has {} units, need at least {groups}",
            first_batch.len()
        )));
    }
    first_batch.require_min_units(2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.ga.seed);
    let partition = Partition::random_balanced(first_batch.len(), groups, &mut rng)?;
    let mut group_to_treatment: Vec<usize> = (0..groups).collect();
    group_to_treatment.shuffle(&mut rng);
    let (bandwidth, pca) = match config.pca {
        Some(target) => {
            let pca = fit_pca(first_batch, target)?;
            let scores = transform(&pca, first_batch)?;
            (BandwidthState::from_data(&scores, config.lambda_override)?, Some(pca))
        }
        None => (BandwidthState::from_data(first_batch, config.lambda_override)?, None),
    };
    let gram = if config.freeze_bandwidth && pca.is_none() {
        Some(compute_gram(first_batch, &bandwidth)?)
    } else {
        None
    };
    Ok(OnlineState {
        units: first_batch.clone(),
        labels: partition.into_labels(),
        groups,
        group_to_treatment,
        bandwidth,
        pca,
        config,
        batches: 1,
        rng,
        gram,
    })
}

/// Per-group counts for the next `batch` units.
pub fn admissible_counts(current: &[usize], batch: usize, mode: BalanceMode) -> Vec<Vec<usize>> {
    let l = current.len();
    match mode {
        BalanceMode::Off => {
            let base = balanced_sizes(batch, l);
            spread_extras(l, batch % l)
                .into_iter()
                .map(|extra| extra.iter().map(|&e| base[l - 1] + e).collect())
                .collect()
        }
        BalanceMode::Strict => {
            let total = current.iter().sum::<usize>() + batch;
            let floor = total / l;
            let out: Vec<Vec<usize>> = spread_extras(l, total % l)
                .into_iter()
                .filter_map(|extra| {
                    (0..l)
                        .map(|g| (floor + extra[g]).checked_sub(current[g]))
                        .collect::<Option<Vec<usize>>>()
                })
                .collect();
            if out.is_empty() {
                vec![water_fill(current, batch)]
            } else {
                out
            }
        }
    }
}

/// All 0/1 vectors of length `l` with `r` ones, in lexicographic order.
fn spread_extras(l: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(l);
    fn rec(l: usize, r: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        let placed: usize = current.iter().sum();
        if current.len() == l {
            if placed == r {
                out.push(current.clone());
            }
            return;
        }
        let left = l - current.len();
        for bit in [1, 0] {
            if placed + bit <= r && placed + bit + left > r {
                current.push(bit);
                rec(l, r, current, out);
                current.pop();
            }
        }
    }
    rec(l, r, &mut current, &mut out);
    out
}

/// Units go one at a time to the currently smallest group.
fn water_fill(current: &[usize], batch: usize) -> Vec<usize> {
    let mut sizes = current.to_vec();
    let mut counts = vec![0; current.len()];
    for _ in 0..batch {
        let g = (0..sizes.len()).min_by_key(|&g| sizes[g]).unwrap();
        sizes[g] += 1;
        counts[g] += 1;
    }
    counts
}

fn multinomial(counts: &[usize]) -> f64 {
    let mut total = 0usize;
    let mut value = 1.0f64;
    for &c in counts {
        for k in 1..=c {
            total += 1;
            value *= total as f64 / k as f64;
        }
    }
    value
}

/// Every labeling with the given per-group counts.
fn for_each_labeling(counts: &[usize], mut visit: impl FnMut(&[usize])) {
    let n: usize = counts.iter().sum();
    let mut left = counts.to_vec();
    let mut labels = Vec::with_capacity(n);
    fn rec(n: usize, left: &mut [usize], labels: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if labels.len() == n {
            visit(labels);
            return;
        }
        for g in 0..left.len() {
            if left[g] > 0 {
                left[g] -= 1;
                labels.push(g);
                rec(n, left, labels, visit);
                labels.pop();
                left[g] += 1;
            }
        }
    }
    rec(n, &mut left, &mut labels, &mut visit);
}

/// Minimum over all labelings with `counts`; first minimum in enumeration order.
fn exhaustive_best(engine: &CriterionEngine, counts: &[usize]) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::INFINITY);
    for_each_labeling(counts, |labels| {
        let v = engine.evaluate(labels);
        if v < best.1 {
            best = (labels.to_vec(), v);
        }
    });
    best
}

fn ga_budget(config: &GaConfig) -> f64 {
    (config.population + config.max_iters * (config.population - config.elites)) as f64
}

impl OnlineState {
    pub fn units(&self) -> &CovariateSet {
        &self.units
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn partition(&self) -> Result<Partition> {
        Partition::new(self.labels.clone(), self.groups)
    }

    pub fn group_to_treatment(&self) -> &[usize] {
        &self.group_to_treatment
    }

    pub fn bandwidth(&self) -> &BandwidthState {
        &self.bandwidth
    }

    pub fn pca(&self) -> Option<&PcaState> {
        self.pca.as_ref()
    }

    pub fn config(&self) -> &OnlineConfig {
        &self.config
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.groups];
        for &g in &self.labels {
            sizes[g] += 1;
        }
        sizes
    }

    pub fn assignments(&self) -> Vec<Assignment> {
        self.units
            .unit_ids()
            .iter()
            .zip(&self.labels)
            .map(|(id, &g)| Assignment {
                unit_id: id.clone(),
                group: g,
                treatment: self.group_to_treatment[g],
            })
            .collect()
    }

    /// Covariates the criterion operates on (PCA scores when enabled).
    fn working_covariates(&self, units: &CovariateSet) -> Result<CovariateSet> {
        match &self.pca {
            Some(pca) => transform(pca, units),
            None => Ok(units.clone()),
        }
    }

    /// `T_H` of all assigned units under the current bandwidth.
    pub fn criterion(&self) -> Result<f64> {
        let partition = self.partition()?;
        let gram = match &self.gram {
            Some(g) => g.clone(),
            None => compute_gram(&self.working_covariates(&self.units)?, &self.bandwidth)?,
        };
        criterion(&gram, &partition)
    }

    fn check_invariants(&self) -> Result<()> {
        if self.labels.len() != self.units.len() {
            return Err(DesignError::State(format!(
                "{} labels for {} units",
                self.labels.len(),
                self.units.len()
            )));
        }
        if self.labels.iter().any(|&g| g >= self.groups) {
            return Err(DesignError::State("label outside the group range".into()));
        }
        let mut seen = vec![false; self.groups];
        for &t in &self.group_to_treatment {
            if t >= self.groups || std::mem::replace(&mut seen[t], true) {
                return Err(DesignError::State("group-to-treatment map is not a bijection".into()));
            }
        }
        if self.group_to_treatment.len() != self.groups {
            return Err(DesignError::State("group-to-treatment map has the wrong length".into()));
        }
        let input_dim = self.pca.as_ref().map_or(self.bandwidth.dim(), PcaState::dim);
        self.units.require_dim(input_dim)?;
        Ok(())
    }

    /// Assigns `batch`, returning the new state and the batch's assignments.
    pub fn assign_batch(&self, batch: &CovariateSet) -> Result<(OnlineState, Vec<Assignment>)> {
        self.check_invariants()?;
        if batch.is_empty() {
            return Err(DesignError::InvalidCovariates("empty batch".into()));
        }
        batch.require_dim(self.units.dim())?;
        let all = self.units.concat(batch)?;
        let mut next = self.clone();

        let (gram, bandwidth) = match &self.pca {
            Some(pca) => {
                let pca = update_pca(pca, batch)?;
                let scores = transform(&pca, &all)?;
                let bw = BandwidthState::from_data(&scores, self.config.lambda_override)?;
                next.pca = Some(pca);
                (compute_gram(&scores, &bw)?, bw)
            }
            None if self.config.freeze_bandwidth => {
                let old = match &self.gram {
                    Some(g) => g.clone(),
                    None => compute_gram(&self.units, &self.bandwidth)?,
                };
                (
                    extend_gram(&old, &self.units, batch, &self.bandwidth)?,
                    self.bandwidth.clone(),
                )
            }
            None => {
                let bw = self.bandwidth.update_inverse(batch)?;
                (compute_gram(&all, &bw)?, bw)
            }
        };

        let engine = CriterionEngine::with_frozen(&gram, &self.labels, self.groups)?;
        let mut rng = self.rng.clone();
        let mut best: Option<(Vec<usize>, f64)> = None;
        for counts in admissible_counts(&self.sizes(), batch.len(), self.config.balance) {
            let exhaustive =
                batch.len() <= self.config.exhaustive_batch || multinomial(&counts) <= ga_budget(&self.config.ga);
            let (labels, value) = if exhaustive {
                exhaustive_best(&engine, &counts)
            } else {
                let (labels, value, _) = evolve(&engine, &counts, &self.config.ga, &[], &mut rng);
                (labels, value)
            };
            if best.as_ref().is_none_or(|(_, v)| value < *v) {
                best = Some((labels, value));
            }
        }
        let (new_labels, _) = best.expect("at least one admissible count vector");

        next.labels.extend(&new_labels);
        next.units = all;
        next.bandwidth = bandwidth;
        next.batches += 1;
        next.rng = rng;
        next.gram = self
            .config
            .freeze_bandwidth
            .then_some(gram)
            .filter(|_| self.pca.is_none());
        let assignments = batch
            .unit_ids()
            .iter()
            .zip(&new_labels)
            .map(|(id, &g)| Assignment {
                unit_id: id.clone(),
                group: g,
                treatment: self.group_to_treatment[g],
            })
            .collect();
        Ok((next, assignments))
    }

    fn body(&self) -> StateBody {
        StateBody {
            units: self.units.clone(),
            labels: self.labels.clone(),
            groups: self.groups,
            group_to_treatment: self.group_to_treatment.clone(),
            bandwidth: self.bandwidth.clone(),
            pca: self.pca.clone(),
            config: self.config.clone(),
            batches: self.batches,
            rng: RngPosition::capture(&self.rng),
        }
    }

    /// Versioned JSON snapshot with a SHA-256 checksum of the body.
    pub fn to_snapshot_json(&self) -> Result<String> {
        let body = self.body();
        let checksum = body_checksum(&body)?;
        let snapshot = Snapshot {
            format: STATE_FORMAT.into(),
            version: STATE_VERSION,
            checksum,
            body,
        };
        Ok(serde_json::to_string_pretty(&snapshot)?)
    }

    pub fn from_snapshot_json(text: &str) -> Result<Self> {
        let snapshot: Snapshot =
            serde_json::from_str(text).map_err(|e| DesignError::State(format!("unreadable state: {e}")))?;
        if snapshot.format != STATE_FORMAT {
            return Err(DesignError::State(format!(
                "not a state file (format {:?})",
                snapshot.format
            )));
        }
        if snapshot.version != STATE_VERSION {
            return Err(DesignError::State(format!(
                "state version {} is not supported (expected {STATE_VERSION})",
                snapshot.version
            )));
        }
        let expected = body_checksum(&snapshot.body)?;
        if expected != snapshot.checksum {
            return Err(DesignError::State("state checksum mismatch".into()));
        }
        let body = snapshot.body;
        let state = OnlineState {
            rng: body.rng.restore()?,
            units: body.units,
            labels: body.labels,
            groups: body.groups,
            group_to_treatment: body.group_to_treatment,
            bandwidth: body.bandwidth,
            pca: body.pca,
            config: body.config,
            batches: body.batches,
            gram: None,
        };
        state.check_invariants()?;
        Ok(state)
    }
}

/// Checksum recorded in a snapshot document, without full validation.
pub fn snapshot_checksum(text: &str) -> Result<String> {
    #[derive(Deserialize)]
    struct Head {
        checksum: String,
    }
    let head: Head = serde_json::from_str(text).map_err(|e| DesignError::State(format!("unreadable state: {e}")))?;
    Ok(head.checksum)
}

fn body_checksum(body: &StateBody) -> Result<String> {
    let canonical = serde_json::to_vec(body)?;
    Ok(hex::encode(Sha256::digest(&canonical)))
}

/// Random labels for a batch under the same count constraint; used as the
/// sequential-randomized baseline.
pub fn random_batch_labels<R: Rng + ?Sized>(
    current: &[usize],
    batch: usize,
    mode: BalanceMode,
    rng: &mut R,
) -> Vec<usize> {
    let options = admissible_counts(current, batch, mode);
    let counts = &options[rng.random_range(0..options.len())];
    let mut labels = crate::data::labels_from_sizes(counts);
    labels.shuffle(rng);
    labels
}
