//! Semilinear first-order hyperbolic systems on the strip `[0,1] x [0,T]`
//! with nonlocal and nonlinear boundary conditions: characteristic solver,
//! boundary-reflection path analysis, singular (delta-wave) data and
//! smoothing diagnostics.

pub mod characteristics;
pub mod delta;
pub mod error;
pub mod expr;
pub mod jet;
pub mod paths;
pub mod problem;
pub mod regularity;
pub mod report;
pub mod solver;
pub mod wave;

pub use characteristics::{exp_weight, intersect, trace_characteristic, CharCurve, Direction, Side};
pub use delta::{
    compute_j_sets, delta_wave, solve_regular, solve_singular, DeltaOptions, DeltaWaveDecomposition, Mollifier,
    SingularAtom,
};
pub use error::*;
pub use expr::{Expr, Var, VarPolicy};
pub use problem::{
    check_compatibility, check_growth_certificate, parse_problem, validate_hyperbolicity, Atom, BoundaryLaw,
    CompatReport, GrowthReport, HyperbolicityVerdict, InitialData, ProblemSpec, SpecParts, WaveTag,
};
pub use paths::{
    check_iota, check_iota2, compute_tj, det_r_criterion, influence_domain, influence_sets, trace_eps, validate_ip,
    DetRVerdict, Ep, InfluenceSets, IotaVerdict, Ip, PathGraph, PathOptions, ReflectionEvent, ReflectionKind, Seed,
};
pub use regularity::{
    classify, smoothing_report, smoothness_indicator, solve_ladder, Classification, Indicator, RegularityOptions,
    RegularityReport,
};
pub use solver::{picard_solve, residual, solve_from_line, BoundaryTrace, SolutionGrid, SolveOptions, SolveReport};
pub use wave::{lift_wave_solution, reduce_wave, WaveProblem};
