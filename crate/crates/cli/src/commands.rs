use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use abdesign::ga::optimize;
use abdesign::io::{assignments_for, read_assignments, read_covariates, write_assignments};
use abdesign::metrics::{mahalanobis_balance, MahalanobisReport};
use abdesign::online::snapshot_checksum;
use abdesign::simlab::{run_comparison, OnlineOptions, Scenario, ScenarioConfig};
use abdesign::{
    compute_gram, criterion, fit_pca, init_online, transform, BandwidthState, CovariateSet, DesignError, GaConfig,
    OnlineConfig, OnlineState, Partition, PcaState, PcaTarget,
};
use anyhow::{Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::{AssignArgs, DesignArgs, EvaluateArgs, InitArgs, SimulateArgs};
use crate::files::{read_text, require_input, require_output, usage, write_atomic, Staged};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn load_covariates(path: &Path) -> Result<CovariateSet> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_covariates(file).with_context(|| format!("reading covariates from {}", path.display()))
}

fn csv_bytes(assignments: &[abdesign::Assignment]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_assignments(assignments, &mut buf)?;
    Ok(buf)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

#[derive(Serialize)]
struct PcaSummary {
    q: usize,
    explained_fraction: f64,
}

impl PcaSummary {
    fn of(state: &PcaState) -> Self {
        Self {
            q: state.q(),
            explained_fraction: state.explained_fraction(),
        }
    }
}

/// Covariates the criterion is computed on, after the optional PCA step.
fn design_space(data: &CovariateSet, target: Option<PcaTarget>) -> Result<(CovariateSet, Option<PcaState>)> {
    match target {
        None => Ok((data.clone(), None)),
        Some(t) => {
            let pca = fit_pca(data, t)?;
            Ok((transform(&pca, data)?, Some(pca)))
        }
    }
}

fn discrepancy(space: &CovariateSet, partition: &Partition) -> Result<f64> {
    let bw = BandwidthState::from_data(space, None)?;
    let gram = compute_gram(space, &bw)?;
    Ok(criterion(&gram, partition)?)
}

#[derive(Serialize)]
struct DesignReport<'a> {
    schema_version: u32,
    command: &'static str,
    units: usize,
    groups: usize,
    sizes: Vec<usize>,
    th: f64,
    mahalanobis: MahalanobisReport,
    group_to_treatment: Vec<usize>,
    generations: usize,
    ga: &'a GaConfig,
    pca: Option<PcaSummary>,
}

pub fn design(args: DesignArgs) -> Result<()> {
    require_input(&args.input)?;
    require_output(&args.out)?;
    if let Some(r) = &args.report {
        require_output(r)?;
    }
    let data = load_covariates(&args.input)?;
    let l = args.groups;
    if l < 2 {
        return Err(usage("--groups must be at least 2"));
    }
    if data.len() < l {
        return Err(DesignError::InvalidCovariates(format!("{} units cannot fill {l} groups", data.len())).into());
    }
    let mut ga = args.ga.config(data.len());
    ga.sizes = args.sizes.clone();
    ga.validate()?;

    let (space, pca) = design_space(&data, args.pca.target())?;
    let bw = BandwidthState::from_data(&space, None)?;
    let gram = compute_gram(&space, &bw)?;
    let result = optimize(&gram, l, &ga)?;

    let mut mapping: Vec<usize> = (0..l).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(args.ga.seed);
    rng.set_stream(1);
    mapping.shuffle(&mut rng);

    let assignments = assignments_for(data.unit_ids(), &result.partition, &mapping)?;
    let report = DesignReport {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "design",
        units: data.len(),
        groups: l,
        sizes: result.partition.sizes(),
        th: result.value,
        mahalanobis: mahalanobis_balance(&data, &result.partition)?,
        group_to_treatment: mapping.iter().map(|t| t + 1).collect(),
        generations: result.trace.len() - 1,
        ga: &ga,
        pca: pca.as_ref().map(PcaSummary::of),
    };
    write_atomic(&args.out, &csv_bytes(&assignments)?)?;
    if let Some(r) = &args.report {
        write_atomic(r, &json_bytes(&report)?)?;
    }
    Ok(())
}

pub fn init(args: InitArgs) -> Result<()> {
    require_input(&args.input)?;
    require_output(&args.state)?;
    require_output(&args.out)?;
    if args.state.exists() && !args.force {
        return Err(usage(format!(
            "state file {} already exists; pass --force to replace it",
            args.state.display()
        )));
    }
    let data = load_covariates(&args.input)?;
    let config = OnlineConfig {
        ga: args.ga.config(data.len()),
        balance: args.balance.into(),
        freeze_bandwidth: args.freeze_bandwidth,
        pca: args.pca.target(),
        ..OnlineConfig::default()
    };
    let state = init_online(&data, args.groups, config)?;
    let text = state.to_snapshot_json()?;
    OnlineState::from_snapshot_json(&text)?;
    let out = Staged::new(&args.out, &csv_bytes(&state.assignments())?)?;
    let st = Staged::new(&args.state, text.as_bytes())?;
    out.commit()?;
    st.commit()
}

pub fn assign(args: AssignArgs) -> Result<()> {
    require_input(&args.state)?;
    require_input(&args.batch)?;
    require_output(&args.out)?;
    let original = read_text(&args.state)?;
    let state = OnlineState::from_snapshot_json(&original)
        .with_context(|| format!("loading state {}", args.state.display()))?;
    let checksum = snapshot_checksum(&original)?;
    let batch = load_covariates(&args.batch)?;

    let (next, assignments) = state.assign_batch(&batch)?;
    let text = next.to_snapshot_json()?;
    OnlineState::from_snapshot_json(&text).context("new state failed verification")?;

    let out = Staged::new(&args.out, &csv_bytes(&assignments)?)?;
    let staged = Staged::new(&args.state, text.as_bytes())?;
    // Another writer may have replaced the state while this batch was searched.
    let current = read_text(&args.state)?;
    if snapshot_checksum(&current).ok().as_deref() != Some(checksum.as_str()) {
        return Err(DesignError::State(format!(
            "state file {} changed during assignment; nothing was written",
            args.state.display()
        ))
        .into());
    }
    out.commit()?;
    staged.commit()
}

fn default_n(scenario: Scenario, groups: usize) -> usize {
    match scenario {
        Scenario::Case1 | Scenario::Case2 => 100 * groups,
        Scenario::Logistic | Scenario::Highdim => 400,
    }
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    if let Some(c) = &args.config {
        require_input(c)?;
    }
    require_output(&args.out)?;
    if let Some(s) = &args.summary {
        require_output(s)?;
    }
    let config = match &args.config {
        Some(path) => serde_json::from_str::<ScenarioConfig>(&read_text(path)?)
            .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?,
        None => {
            let scenario = args.scenario.expect("required by clap");
            let groups = args.groups.unwrap_or(2);
            let n = args.n.unwrap_or_else(|| default_n(scenario, groups));
            let mut c = ScenarioConfig::new(scenario, groups, n);
            c.ga = args.ga.config(n);
            c.seed = args.ga.seed;
            if let Some(r) = args.reps {
                c.replicates = r;
            }
            if let Some(s) = args.sigma {
                c.sigma = s;
            }
            if let (Some(initial), Some(batch)) = (args.online_initial, args.online_batch) {
                c.online = Some(OnlineOptions { initial, batch });
            }
            c
        }
    };
    let report = run_comparison(&config)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_atomic(&args.out, &csv)?;
    if let Some(s) = &args.summary {
        let mut text = report.summary_json()?;
        text.push('\n');
        write_atomic(s, text.as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluateReport {
    schema_version: u32,
    command: &'static str,
    units: usize,
    groups: usize,
    sizes: Vec<usize>,
    th: f64,
    mahalanobis: MahalanobisReport,
    pca: Option<PcaSummary>,
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    require_input(&args.input)?;
    require_input(&args.assignments)?;
    if let Some(r) = &args.report {
        require_output(r)?;
    }
    let data = load_covariates(&args.input)?;
    let file = File::open(&args.assignments)?;
    let assignments =
        read_assignments(file).with_context(|| format!("reading assignments from {}", args.assignments.display()))?;
    let by_id: HashMap<&str, usize> = assignments.iter().map(|a| (a.unit_id.as_str(), a.group)).collect();
    if by_id.len() != assignments.len() || assignments.len() != data.len() {
        return Err(DesignError::InvalidPartition(format!(
            "{} assignments for {} units (ids must be unique and match the input)",
            assignments.len(),
            data.len()
        ))
        .into());
    }
    let labels = data
        .unit_ids()
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| DesignError::InvalidPartition(format!("unit {id:?} has no assignment")))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let groups = labels.iter().max().map_or(0, |g| g + 1);
    let partition = Partition::new(labels, groups)?;

    let (space, pca) = design_space(&data, args.pca.target())?;
    let report = EvaluateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "evaluate",
        units: data.len(),
        groups,
        sizes: partition.sizes(),
        th: discrepancy(&space, &partition)?,
        mahalanobis: mahalanobis_balance(&data, &partition)?,
        pca: pca.as_ref().map(PcaSummary::of),
    };
    let bytes = json_bytes(&report)?;
    match &args.report {
        Some(path) => write_atomic(path, &bytes),
        None => {
            print!("{}", String::from_utf8(bytes)?);
            Ok(())
        }
    }
}
