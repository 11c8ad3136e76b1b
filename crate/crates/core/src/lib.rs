//! Discrete solvers for the Schrödinger system, h-path bridges and their diagnostics.

pub mod duality;
pub mod error;
mod flow;
pub mod grid;
pub mod hpath;
pub mod kernel;
pub mod measure;
pub mod numerics;
pub mod sdesim;
pub mod solver;
pub mod stability;

pub use duality::{BruteConjugate, BruteConjugateOptions, DualityInstance, GateauxCheck, GateauxReport};
pub use error::{Error, Result};
pub use grid::Grid;
pub use measure::{
    bounded_lipschitz_distance, product_measure, product_tv_norm, product_tv_norm_on, tv_norm,
    DiscreteMeasure,
};
pub use hpath::{
    backward_pde_residual, build_bridge, build_meanfield_field, meanfield_residuals,
    spatial_order_study, BridgeModel, BridgeSpec, MeanFieldField, MeanFieldResiduals,
    RecomputeReport, ResidualGrid,
};
pub use kernel::{
    verify_chapman_kolmogorov, ChapmanKolmogorovReport, Coefficient, Kernel, KernelBounds,
    KernelMatrix, Profile, TransitionKernel, VectorParam,
};
pub use sdesim::{
    control_cost_report, empirical_marginal_check, simulate_bridge, simulate_reference,
    ControlSpec, CostReport, MarginalCheck, PathEnsemble, SimulationConfig,
};
pub use solver::{
    brute_force_solve, normalize_pair, potentials, solve, solve_from, verify_solution,
    SchrodingerSolution, SolutionReport, SolverConfig,
};
pub use stability::{
    exhaustion_solve, geometric_levels, holder_exponent_fit, holder_fit_points,
    restriction_inequality, stability_experiment, ExhaustionReport, ExhaustionScheme, HolderFit,
    PerturbationFamily, Problem, StabilityReport,
};
