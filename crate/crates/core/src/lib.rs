//! Finite-horizon, discrete-time stochastic linear-quadratic control with
//! multiplicative noise and a `d`-step transmission delay.
//!
//! The crate computes the coupled Riccati-like recursions of the delayed
//! problem, classifies solvability (including indefinite weights), extracts
//! the delayed feedback law `u_k = -W_k^† H_k E_{k-d} X_k`, and checks all of
//! it against exact scenario-tree oracles under Rademacher noise.
//!
//! Module map:
//!
//! * [`linalg`]: pseudo-inverse, definiteness and range tests, extended Schur test.
//! * [`model`]: problem data, the binary scenario tree, adapted processes, policies.
//! * [`riccati`]: the piecewise and unified recursions, classification, values, gains.
//! * [`lmei`]: membership in the coupled matrix equality-inequality set and the
//!   constructive map back to a Riccati solution.
//! * [`bsde`]: backward difference equations, operator adjoints and the
//!   brute-force quadratic oracle.
//! * [`simulate`]: exact and Monte-Carlo evaluation, the delayed predictor and
//!   cost identities.

pub mod bsde;
pub mod error;
pub mod instances;
pub mod linalg;
pub mod lmei;
pub mod model;
pub mod riccati;
pub mod simulate;

pub use error::{DelqError, Result};
pub use linalg::{Matrix, Tolerances, Vector};
pub use model::{AdaptedProcess, Policy, ProblemData, ScenarioTree};
pub use lmei::{LmeiCandidate, LmeiReport};
pub use riccati::{Classification, RiccatiSolution, SolvabilityReport};
