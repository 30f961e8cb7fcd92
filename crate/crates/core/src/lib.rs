//! Optimal transport of vector-valued measures with finite support.
//!
//! The crate solves the primal coupling problem and the 1-Lipschitz dual
//! potential problem, certifies optimality of primal-dual pairs, extracts leaf
//! and transport-set decompositions from potentials, builds the mass-balance
//! counterexample family, and checks curvature-dimension conditions of
//! disintegrated grid densities along needles.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certifier;
pub mod disintegration;
pub mod error;
pub mod float_serde;
pub mod leaves;
pub mod linalg;
pub mod mass_balance;
pub mod measure;
pub mod par;
pub mod random;
pub mod selftest;
pub mod solver;

pub use certifier::{certify, isometry_saturation_set, OptimalityCertificate, Verdict};
pub use error::{Error, Result};
pub use leaves::{
    decompose, extract_leaves, isometry_graph, maximal_transport_sets, transport_set, Leaf, LeafDecomposition,
};
pub use mass_balance::{
    mass_balance_report, run_counterexample, BalanceVerdict, CounterexampleSpec, MassBalanceReport, Preset,
};
pub use measure::{
    DistanceMatrix, Instance, InstanceFile, LipschitzEstimate, PointCloud, PotentialField, VectorCoupling,
    VectorMeasure,
};
pub use par::Exec;
pub use solver::{kr_norm, line_oracle, solve, solve_batch, EdgePolicy, SolveReport, SolveStatus, SolverParams};
