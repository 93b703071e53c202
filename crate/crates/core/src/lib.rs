//! White-box adversarial attacks on point-cloud scene flow.
//!
//! The crate bundles a small reverse-mode differentiation engine ([`ad`]),
//! scene data types and file formats ([`pointcloud`]), a synthetic scene
//! generator ([`synthgen`]), two differentiable flow estimators
//! ([`estimators`]), the FGSM/PGD/random attacks on the first frame
//! ([`attacks`]) and an experiment harness with JSON/CSV/SVG output
//! ([`harness`]).

pub mod ad;
pub mod attacks;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod pointcloud;
pub mod seed;
pub mod synthgen;

pub use error::{Error, Result};
