//! Command-line arguments. Every argument struct also round-trips through
//! JSON so that `--config` files can override individual flags by name.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{usage, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "groupfs", version, about = "Unsupervised group feature selection")]
pub struct Cli {
    /// Root directory for relative output paths.
    #[arg(long, global = true, env = "GROUPFS_OUT", default_value = ".")]
    pub out_root: PathBuf,

    /// JSON object whose keys override the flags of the chosen command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Log per-epoch losses (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the two-moons benchmark as CSV plus a metadata sidecar.
    Generate(GenerateArgs),
    /// Distortion curve over group counts and the chosen C.
    ChooseC(ChooseCArgs),
    /// Train one model, or one per value of `--lambda2-sweep`.
    Train(TrainArgs),
    /// Train over a lambda2 range and several seeds.
    Sweep(SweepArgs),
    /// Rank groups of a checkpoint and apply a feature budget.
    Select(SelectArgs),
    /// Clustering and group-recovery metrics for a selection.
    Eval(EvalArgs),
    /// Compare reverse-mode gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub d: usize,
    /// Correlation between each moon coordinate and its copies.
    #[arg(long, default_value_t = 0.95)]
    pub rho: f64,
    /// Std of the additive sample noise.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub synthetic: SyntheticArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; the sidecar goes next to it.
    #[arg(long, default_value = "data.csv")]
    pub out: PathBuf,
}

/// A CSV file, or the synthetic benchmark when no file is given.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Column holding class labels; other columns are features.
    #[arg(long)]
    pub label_column: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub synthetic: SyntheticArgs,
    /// Seed of the synthetic data.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ChooseCArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 12)]
    pub c_max: usize,
    /// Neighbour rank of the feature-graph kernel.
    #[arg(long, default_value_t = 7)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "curve.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Number of groups, or `auto` for the distortion heuristic.
    #[arg(long, default_value = "auto")]
    pub groups: String,
    /// Largest C tried by `--groups auto`.
    #[arg(long, default_value_t = 12)]
    pub c_max: usize,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
    /// `lo:hi:steps`, inclusive of both ends; replaces `--lambda2`.
    #[arg(long)]
    pub lambda2_sweep: Option<String>,
    /// Orthogonality weight; defaults to 1 / lambda1.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value_t = 7)]
    pub k: usize,
    #[arg(long, default_value_t = 2)]
    pub t: usize,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.7)]
    pub p_main: f64,
    #[arg(long, default_value_t = 10.0)]
    pub start_t: f64,
    #[arg(long, default_value_t = 0.01)]
    pub min_t: f64,
    /// Differentiate through the kernel bandwidths.
    #[arg(long, default_value_t = false)]
    pub propagate_bandwidth_grad: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
    /// Training seeds `seed..seed + seeds` per lambda2 value.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `groups:K`, `min-features:M` or `max-features:M`.
    #[arg(long, default_value = "min-features:10")]
    pub rule: String,
    #[arg(long, default_value = "selection.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub selection: PathBuf,
    /// Clusters for k-means; defaults to the number of classes.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Number of k-means seeds, starting at 0.
    #[arg(long, default_value_t = 10)]
    pub eval_seeds: u64,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 30)]
    pub n: usize,
    #[arg(long, default_value_t = 12)]
    pub d: usize,
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = false)]
    pub propagate_bandwidth_grad: bool,
    /// Corrupt the analytic gradient to exercise the failure path.
    #[arg(long, hide = true, default_value_t = false)]
    pub inject_bug: bool,
}

/// Overrides the fields of `args` with the keys of a JSON object.
pub fn apply_config<T: Serialize + DeserializeOwned>(args: T, path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
    let json_err = |source| CliError::Json { path: path.display().to_string(), source };
    let overrides: Value = serde_json::from_str(&text).map_err(json_err)?;
    let Value::Object(overrides) = overrides else {
        return Err(usage(format!("{}: config must be a JSON object", path.display())));
    };
    let Value::Object(mut base) = serde_json::to_value(args).map_err(json_err)? else {
        unreachable!("argument structs serialize to objects")
    };
    for (key, value) in overrides {
        if !base.contains_key(&key) {
            return Err(usage(format!("{}: unknown key {key:?} for this command", path.display())));
        }
        base.insert(key, value);
    }
    serde_json::from_value(Value::Object(base)).map_err(json_err)
}

/// `lo:hi:steps`, evenly spaced and inclusive of both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRange {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl SweepRange {
    pub fn values(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.lo];
        }
        let span = self.hi - self.lo;
        (0..self.steps).map(|i| self.lo + span * i as f64 / (self.steps - 1) as f64).collect()
    }
}

impl FromStr for SweepRange {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let bad = || usage(format!("sweep range {s:?} must look like lo:hi:steps"));
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, steps] = parts.as_slice() else {
            return Err(bad());
        };
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        let steps: usize = steps.trim().parse().map_err(|_| bad())?;
        if steps == 0 || !lo.is_finite() || !hi.is_finite() || hi < lo {
            return Err(usage(format!("sweep range {s:?} needs lo <= hi and at least one step")));
        }
        if steps == 1 && hi != lo {
            return Err(usage(format!("sweep range {s:?} has one step but two distinct ends")));
        }
        Ok(Self { lo, hi, steps })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupCount {
    Auto,
    Fixed(usize),
}

impl FromStr for GroupCount {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        s.parse().map(Self::Fixed).map_err(|_| usage(format!("--groups expects a count or `auto`, got {s:?}")))
    }
}

pub fn parse_rule(s: &str) -> CliResult<groupfs::select::BudgetRule> {
    use groupfs::select::BudgetRule;
    let bad = || usage(format!("rule {s:?} must be groups:K, min-features:M or max-features:M"));
    let (kind, value) = s.split_once(':').ok_or_else(bad)?;
    let value: usize = value.trim().parse().map_err(|_| bad())?;
    match kind.trim() {
        "groups" => Ok(BudgetRule::Groups(value)),
        "min-features" => Ok(BudgetRule::MinFeatures(value)),
        "max-features" => Ok(BudgetRule::MaxFeatures(value)),
        _ => Err(bad()),
    }
}
