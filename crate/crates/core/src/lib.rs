//! Camera pose regression with geometric loss functions.
//!
//! The crate is organised bottom-up:
//!
//! * [`geom`]: quaternions, poses and the pinhole projection.
//! * [`loss`]: fixed-weight, learned-weight and reprojection losses with
//!   analytic gradients.
//! * [`model`]: a small fully connected regressor with a 7-D pose head.
//! * [`scene`]: synthetic scenes, camera paths and observations.
//! * [`data`]: pose-label files and frame centring.
//! * [`train`]: ADAM, the training loop, two-step training and beta sweeps.
//! * [`eval`]: localisation metrics and CSV reports.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geom;
pub mod loss;
pub mod model;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
