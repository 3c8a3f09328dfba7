use std::path::PathBuf;

use abdesign::simlab::Scenario;
use abdesign::{BalanceMode, GaConfig, PcaTarget};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "abdesign", version, about = "Covariate-balanced A/B/n experimental designs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split all units of a covariate file into groups at once.
    Design(DesignArgs),
    /// Start an online experiment from its first batch.
    Init(InitArgs),
    /// Assign a new batch of an online experiment.
    Assign(AssignArgs),
    /// Compare randomized and discrepancy designs on a synthetic scenario.
    Simulate(SimulateArgs),
    /// Score an existing assignment.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GaArgs {
    /// Population size M.
    #[arg(long)]
    pub pop: Option<usize>,
    /// Elites kept per generation.
    #[arg(long)]
    pub elites: Option<usize>,
    /// Maximum generations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Stop after this many generations without improvement.
    #[arg(long)]
    pub stall: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl GaArgs {
    /// Defaults scale with `n`; explicit flags win.
    pub fn config(&self, n: usize) -> GaConfig {
        let mut c = GaConfig::scaled_for(n).with_seed(self.seed);
        if let Some(pop) = self.pop {
            c.population = pop;
            c.elites = c.elites.min(pop);
        }
        if let Some(e) = self.elites {
            c.elites = e;
        }
        if let Some(i) = self.iters {
            c.max_iters = i;
        }
        c.stall_window = self.stall;
        c
    }
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    /// Reduce covariates to this many principal components first.
    #[arg(long, conflicts_with = "pca_var")]
    pub pca_q: Option<usize>,
    /// Keep the fewest components explaining at least this variance fraction.
    #[arg(long)]
    pub pca_var: Option<f64>,
}

impl PcaArgs {
    pub fn target(&self) -> Option<PcaTarget> {
        match (self.pca_q, self.pca_var) {
            (Some(q), _) => Some(PcaTarget::Components(q)),
            (None, Some(v)) => Some(PcaTarget::VarianceFraction(v)),
            (None, None) => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    /// Covariate CSV: header row, unit_id column, numeric covariates.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub groups: usize,
    /// Group sizes, comma separated; balanced if omitted.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[command(flatten)]
    pub ga: GaArgs,
    #[command(flatten)]
    pub pca: PcaArgs,
    /// Assignment CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON report to write.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Balance {
    Strict,
    Off,
}

impl From<Balance> for BalanceMode {
    fn from(b: Balance) -> Self {
        match b {
            Balance::Strict => BalanceMode::Strict,
            Balance::Off => BalanceMode::Off,
        }
    }
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// First batch of units.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub groups: usize,
    #[command(flatten)]
    pub ga: GaArgs,
    #[command(flatten)]
    pub pca: PcaArgs,
    /// Keep the first batch's bandwidth for the whole experiment.
    #[arg(long)]
    pub freeze_bandwidth: bool,
    #[arg(long, value_enum, default_value = "strict")]
    pub balance: Balance,
    /// State file to create.
    #[arg(long)]
    pub state: PathBuf,
    /// Replace an existing state file.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AssignArgs {
    #[arg(long)]
    pub state: PathBuf,
    /// New units to assign.
    #[arg(long)]
    pub batch: PathBuf,
    /// Assignment CSV for the batch.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Full scenario configuration as JSON; replaces the scenario flags.
    #[arg(long, conflicts_with_all = ["scenario", "groups", "n", "reps", "sigma", "online_initial", "online_batch"])]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_scenario, required_unless_present = "config")]
    pub scenario: Option<Scenario>,
    #[arg(long)]
    pub groups: Option<usize>,
    /// Units per replicate; defaults to 100 per group, 400 for logistic and highdim.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Run online designs starting from this many units.
    #[arg(long, requires = "online_batch")]
    pub online_initial: Option<usize>,
    #[arg(long, requires = "online_initial")]
    pub online_batch: Option<usize>,
    #[command(flatten)]
    pub ga: GaArgs,
    /// Per-replicate CSV: replicate,method,metric,value.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON summary with quartiles per method and metric.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: abdesign::DesignError| e.to_string())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Assignment CSV covering every unit of the input.
    #[arg(long)]
    pub assignments: PathBuf,
    #[command(flatten)]
    pub pca: PcaArgs,
    /// Where to write the JSON report; stdout if omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}
