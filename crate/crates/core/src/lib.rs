//! Null controllability of a two-sex age-structured population model.
//!
//! The crate discretizes the state and adjoint systems on a
//! characteristics-aligned grid, minimizes penalized control functionals
//! with conjugate gradients, iterates the frozen-fertility map to a fixed
//! point, and probes the observability constant numerically.

pub mod adjoint;
pub mod control;
pub mod error;
pub mod expr;
pub mod fixed_point;
pub mod forward;
pub mod grid;
pub mod model;
pub mod observability;
pub mod report;
pub mod scenario;
pub mod system;

pub use adjoint::{duality_pairing, solve_adjoint, AdjointMode, AdjointSolution, DualityCheck};
pub use control::{
    evaluate_j, gradient_j, minimize_penalty, synthesize_null_control, ControlResult, EpsSchedule,
    FrozenProblem, PenaltyProblem, Synthesis,
};
pub use error::{Error, Result};
pub use fixed_point::{
    contraction_test, iterate_to_fixed_point, lambda_map, ContractionConfig, ContractionReport,
    FixedPointConfig, FixedPointOutcome, FixedPointState,
};
pub use forward::{compute_m, solve_forward, ControlPair, Coupling, StateSolution};
pub use grid::{region_mask, CharGrid, Field2D};
pub use model::{
    validate_hypotheses, ControlGeometry, ControlMode, DemographicModel, Fertility, RateFn,
    ValidationReport,
};
pub use observability::{
    estimate_constant, geometry_threshold_check, observability_ratio, ObservabilityConfig,
    ObservabilityReport, Quotient,
};
pub use report::{Flag, SolveReport};
pub use scenario::{load_scenario, Scenario, Setup};
pub use system::DiscreteSystem;
