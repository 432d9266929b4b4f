//! Continuous normalizing flows and neural ODE classifiers on 2D data,
//! sparsified by iterative magnitude pruning with learning-rate rewinding.
//!
//! The numerical code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix the scalar to `f64`, which is what the experiments
//! use.

pub mod cnf;
pub mod data;
pub mod eval;
pub mod hessian;
pub mod net;
pub mod odeint;
pub mod prune;
pub mod rng;
pub mod scalar;

pub use net::{Activation, Mask, MlpSpec};
pub use odeint::{Backprop, Method, SolverConfig};
pub use scalar::Scalar;

pub type ParamVector = net::ParamVector<f64>;
pub type FlowModel = cnf::FlowModel<f64>;
pub type AugState = cnf::AugState<f64>;
pub type ClassifierModel = eval::ClassifierModel<f64>;
pub type FlowObjective = prune::FlowObjective<f64>;
pub type Snapshot = prune::Snapshot<f64>;
pub type TrainerState = prune::TrainerState<f64>;
pub type AdamState = prune::AdamState<f64>;
pub type FlowLoss = hessian::FlowLoss<f64>;
