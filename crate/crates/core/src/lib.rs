//! Deterministic simulation of automation-to-driver steering takeover.
//!
//! The crate models a vehicle with a steering column ([`dynamics`]), a
//! synthetic driver ([`driver`]), the authority-allocation logic that decides
//! how much steering the driver may take ([`authority`]), the reference and
//! haptic controllers ([`controllers`]) built on a small dense QP solver
//! ([`qp`]), and a fixed-step simulator ([`sim`]). [`metrics`] reduces run
//! logs to takeover time and signal statistics and runs the paired tests used
//! to compare the fade-out baseline with the two-phase haptic interface.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix the scalar to `f64`, which is what the simulator and the
//! experiment pipeline use.

pub mod authority;
pub mod config;
pub mod controllers;
pub mod driver;
pub mod dynamics;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod qp;
pub mod scalar;
pub mod sim;

pub use scalar::Scalar;

pub type VehicleParams = dynamics::VehicleParams<f64>;
pub type VehicleState = dynamics::VehicleState<f64>;
pub type LinearModel = dynamics::LinearModel<f64>;
pub type DriverProfile = driver::DriverProfile<f64>;
pub type DriverState = driver::DriverState<f64>;
pub type NeuromuscularParams = driver::NeuromuscularParams<f64>;
pub type Thresholds = authority::Thresholds<f64>;
pub type AuthorityStatus = authority::AuthorityStatus<f64>;
pub type QpProblem = qp::QpProblem<f64>;
pub type QpSolution = qp::QpSolution<f64>;
pub type RefMpcParams = controllers::RefMpcParams<f64>;
pub type HapticMpcParams = controllers::HapticMpcParams<f64>;
pub type TorqueSplit = controllers::TorqueSplit<f64>;
