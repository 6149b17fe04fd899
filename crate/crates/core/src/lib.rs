//! Numerical solvers for first-order mean field games driven by a common
//! Brownian noise, in one space dimension.
//!
//! The unknowns are written in coordinates that move with the noise, so the
//! value function solves a backward stochastic Hamilton-Jacobi equation with a
//! martingale correction and the density solves a continuity equation with
//! random coefficients. Time is cut into epochs; the noise is a scenario tree;
//! on each epoch and node the Hamiltonian is frozen and a deterministic problem
//! is solved on a uniform grid.

pub mod coupling;
pub mod error;
pub mod grid;
pub mod hamiltonian;
pub mod hj;
pub mod mfg;
pub mod noise;
pub mod nplayer;
pub mod transport;

pub use coupling::{CouplingF, Kernel, MonotoneCoupling, MonotonicityGap};
pub use error::{MfgError, Result};
pub use grid::{d1_distance, norms, push_forward_shift, DensityField, GridFunction, Norms, SpatialGrid};
pub use hamiltonian::{check_structure, time_modulus, Coefficient, QuadraticHamiltonian, StructureReport, TimeModulus};
pub use hj::{backward_sweep, control_value, costate_along_path, solve_bshj, solve_interval_hj, BshjSolution, HjOptions, HjScheme};
pub use mfg::{
    cauchy_gap, convergence_diagnostics, duality_residual, solve_deterministic_mfg, solve_stochastic_mfg, stability_gap,
    ConvergenceReport, Damping, DeterministicMfgSolution, FixedPointConfig, Initialization, MfgProblem, StabilityGap,
    StochasticMfgSolution, TerminalCost,
};
pub use noise::{build_tree, ScenarioTree, TreePath};
pub use nplayer::{nash_gap, optimal_feedback, simulate_game, Deviation, GameConfig, NashGap};
pub use transport::{characteristics_ensemble, filippov_flow, solve_continuity, DriftField, TrajectoryEnsemble};
