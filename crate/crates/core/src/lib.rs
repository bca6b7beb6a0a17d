//! Multi-fidelity residual physics-informed neural-process (MFR-PINP) state
//! estimation for a planar skid-steer robot.
//!
//! This crate is `no_std` + `alloc`. It holds every algorithm: the autodiff
//! engine, the two physics priors, the simulator, the UKF oracle, the neural
//! process model, the online learner, split conformal calibration and the
//! metrics. File formats, configuration and the CLI live in the `mfrpinp`
//! crate.
#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod physics;
pub mod sim;
pub mod ukf;
pub mod np;
pub mod learner;
pub mod conformal;
pub mod metrics;
