//! Logistic continuous-state branching processes: the excessive function `h`, dual diffusions,
//! path simulation and Monte Carlo verification of the distributional identities.

pub mod analytic;
pub mod cli;
pub mod error;
pub mod mechanism;
pub mod montecarlo;
pub mod paths;
pub mod quad;
pub mod rng;

pub use analytic::{HTransform, ScaleOptions, ScaleTable};
pub use error::{LcbError, Result};
pub use mechanism::{ClosedForm, JumpMeasure, Mechanism, RegimeReport};
