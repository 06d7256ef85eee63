//! mocapfit: fits a parametric articulated 3D body mesh to monocular 2D
//! observations (keypoints, segmentation masks, optical flow) by gradient
//! descent on differentiable reprojection losses.
//!
//! The crate is organized around a generic scalar abstraction: every forward
//! kernel (blendshape sum, rotations, projection, losses) runs both on plain
//! `f64` and on tape variables, so the analytic gradients in [`autodiff`] are
//! certified against central finite differences over the very same code.

pub mod autodiff;
pub mod camera;
pub mod error;
pub mod fitting;
pub mod io;
pub mod losses;
pub mod math;
pub mod mesh;
pub mod scenegen;
pub mod tape;
pub mod visibility;

pub use error::{Error, Result};
