//! Numerical optimization of Bayesian quantum sensors built from N two-level
//! atoms, estimating a 2D or 3D field from collective-spin phase imprints.
//!
//! The crate provides, from the bottom up:
//!
//! * [`spin`]: the sensor Hilbert spaces (symmetric, partitioned, irreducible,
//!   direct-sum-of-spins) and their collective generators;
//! * [`prior`]: isotropic Gaussian priors and tensor Gauss-Hermite quadrature;
//! * [`encoding`]: the phase encoding `U(phi) = exp(-i phi . J)` and cached
//!   phase-averaging maps over quadrature nodes;
//! * [`cost`]: the Bayesian mean-square-error cost, minimum-MSE estimators,
//!   quantum/classical prior-information bounds, and Fisher information;
//! * [`montecarlo`]: seeded Monte-Carlo verification of analytic costs;
//! * [`povm`]: block-coordinate optimization over general POVM sensors;
//! * [`covariant`]: the rotation-covariant two-partition solver (d = 2);
//! * [`projective`]: projective-decoder and classical product-sensor solvers;
//! * [`circuits`]: variational one-axis-twisting circuit sensors;
//! * [`optim`]: the shared quasi-Newton descent used by the local solvers.

pub mod circuits;
pub mod cost;
pub mod covariant;
pub mod encoding;
pub mod error;
pub mod linalg;
pub mod montecarlo;
pub mod optim;
pub mod povm;
pub mod projective;
pub mod prior;
pub mod spin;

pub use circuits::{
    circuit_layout, drop_closest_identity_layer, optimize_variational,
    optimize_variational_with_params, parameter_periods, variational_cost_and_gradient,
    zero_padded_params, CircuitEngine, CircuitFamily, CircuitLayout, GateKind, GateSpec, Target,
    VariationalOptions,
};
pub use covariant::{
    covariant_sensor_record, expand_covariant, solve_covariant_2p, CovariantOptions,
    CovariantSolution,
};

pub use cost::{
    bcrb_quantum, bcrb_sql, cost, fisher_matrix, mmse_estimators, optimal_cost, outcome_moments,
    ratio_to_prior, EstimatorSet, Measurement, MeasurementData, OutcomeMoments, Povm,
    ProjectiveDecoder, SensorSolution, SolveStatus,
};
pub use encoding::{encode, EncodingCache, MomentOperators};
pub use error::{Result, SensorError};
pub use montecarlo::{monte_carlo_bmse, monte_carlo_solution, McEstimate};
pub use povm::{embed_warm_start, solve_oqs, state_step, upsilon, SolveOptions, WarmStart};
pub use projective::{
    projective_sensor_tag, solve_classical, solve_classical_with_params, solve_projective,
    ClassicalOptions, ProjectiveOptions, ProjectiveWarm,
};
pub use prior::{build_polar_quadrature, build_quadrature, polar_orders, Prior, Quadrature};
pub use spin::{
    build_spin_operators, isometry_into_irreducible, multiplicity, PartitionSpec, SensorSpace,
    SpaceKind, SpinRep,
};
