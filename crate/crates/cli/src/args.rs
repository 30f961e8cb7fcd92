use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vecot_core::{EdgePolicy, Exec, SolverParams};

/// Optimal transport of vector-valued measures.
#[derive(Parser, Debug, Serialize)]
#[command(name = "vecot", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Write the JSON document here instead of standard output.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,

    /// Write large arrays (flows, potentials, needles) as CSV files into this
    /// directory and reference them from the JSON document.
    #[arg(long, global = true)]
    pub csv_dir: Option<PathBuf>,

    /// Run every data-parallel loop sequentially.
    #[arg(long, global = true)]
    pub sequential: bool,
}

impl Cli {
    pub fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "lowercase", tag = "name")]
pub enum Command {
    /// Solve the primal and dual problems for an instance.
    Solve(SolveArgs),
    /// Check optimality of a coupling and potential pair.
    Certify(CertifyArgs),
    /// Extract leaves and transport sets of a potential.
    Leaves(LeavesArgs),
    /// Build and analyse a mass-balance counterexample.
    Counterexample(CounterexampleArgs),
    /// Check mass balance on the transport sets of an optimal potential.
    Massbalance(MassBalanceArgs),
    /// Disintegrate a grid density along needles and check CD conditions.
    Disintegrate(DisintegrateArgs),
    /// Run the acceptance suite.
    Selftest,
}

#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct SolverArgs {
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub penalty: Option<f64>,
    #[arg(long)]
    pub tol_primal: Option<f64>,
    #[arg(long)]
    pub tol_dual: Option<f64>,
    #[arg(long)]
    pub tol_gap: Option<f64>,
    #[arg(long)]
    pub relaxation: Option<f64>,
    /// Join each point to its k nearest neighbours only (gives an upper bound).
    #[arg(long)]
    pub knn: Option<usize>,
}

impl SolverArgs {
    pub fn params(&self, base: SolverParams, exec: Exec) -> SolverParams {
        SolverParams {
            max_iters: self.max_iters.unwrap_or(base.max_iters),
            penalty: self.penalty.unwrap_or(base.penalty),
            tol_primal: self.tol_primal.unwrap_or(base.tol_primal),
            tol_dual: self.tol_dual.unwrap_or(base.tol_dual),
            tol_gap: self.tol_gap.unwrap_or(base.tol_gap),
            relaxation: self.relaxation.unwrap_or(base.relaxation),
            edge_policy: self.knn.map_or(base.edge_policy, EdgePolicy::Knn),
            exec,
        }
    }
}

/// Where the instance comes from: a file, or a seeded random draw.
#[derive(Args, Debug, Clone, Serialize)]
pub struct InstanceArgs {
    /// Instance JSON: {"n", "m", "points", "weights"}.
    #[arg(long, required_unless_present = "random")]
    pub input: Option<PathBuf>,
    /// Draw a random zero-mass instance with this many points instead.
    #[arg(long, conflicts_with = "input")]
    pub random: Option<usize>,
    /// Ambient dimension of the random instance.
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Target dimension of the random instance.
    #[arg(long, default_value_t = 2)]
    pub target_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct SolveArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    /// Output of `vecot solve`; solved afresh when absent.
    #[arg(long)]
    pub solution: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct LeavesArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    /// Output of `vecot solve`; solved afresh when absent.
    #[arg(long)]
    pub solution: Option<PathBuf>,
    /// Relative saturation tolerance of the isometry graph.
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    /// Also evaluate the strengthened Lipschitz diagnostics on all leaf pairs.
    #[arg(long)]
    pub diagnostics: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct CounterexampleArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub m: usize,
    /// reference (alias paper) or simplex.
    #[arg(long, default_value = "reference")]
    pub preset: String,
    /// Certificate tolerance.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Ball radii for smoothed versions of the instance.
    #[arg(long, value_delimiter = ',')]
    pub smoothing: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    pub points_per_ball: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct MassBalanceArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    /// Output of `vecot solve`; solved afresh (tol_gap 1e-9 unless given) when
    /// absent.
    #[arg(long)]
    pub solution: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    /// Balance tolerance relative to Σ‖μᵢ‖.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Uniform,
    Ball,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Potential {
    /// Projection onto the first m coordinates.
    Slice,
    /// Distance to a center.
    Radial,
}

#[derive(Args, Debug, Serialize)]
pub struct DisintegrateArgs {
    /// Analytic density on the cube [−half_width, half_width]^dim.
    #[arg(long, conflicts_with = "grid", required_unless_present = "grid")]
    pub family: Option<Family>,
    /// Grid density JSON: {"geometry": {"lower", "upper", "resolution"}, "samples"}.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 4.0)]
    pub half_width: f64,
    #[arg(long, default_value_t = 65)]
    pub resolution: usize,
    /// Radius of the ball family.
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    #[arg(long, value_enum, default_value_t = Potential::Slice)]
    pub potential: Potential,
    /// Leaf dimension of the slice potential.
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    /// Center of the radial potential; the box center when absent.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub center: Option<Vec<f64>>,
    #[arg(long, default_value_t = 128)]
    pub directions: usize,
    /// Samples along the longest ray; defaults to the number of directions.
    #[arg(long)]
    pub radial_samples: Option<usize>,
    /// κ of the CD(κ, N) check on one-dimensional needles.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub kappa: f64,
    /// N of the CD(κ, N) check: a number, or inf.
    #[arg(long = "cd-n", default_value = "inf", allow_hyphen_values = true)]
    pub cd_n: String,
    /// CD tolerance; the truncation-scaled default of each needle when absent.
    #[arg(long)]
    pub cd_tol: Option<f64>,
}
