//! Walsh spider diffusions on star graphs with local-time-dependent
//! coefficients: simulation, local-time estimators, a finite-difference
//! solver for the associated parabolic problem and Feynman-Kac checks.

pub mod cli;
pub mod coeffexpr;
pub mod error;
pub mod feynman_kac;
pub mod localtime;
pub mod network;
pub mod pde;
pub mod rng;
pub mod simulator;
pub mod stats;
pub mod testfn;
pub mod verify;

pub use error::{EvalError, Result, SpiderError};
pub use network::{Bounds, CoefficientSet, EdgeIndex, NetworkPoint};
