//! Desk-scale cooperative BEV perception with feature-flow latency
//! compensation.
//!
//! The crate simulates a roadside unit and a moving vehicle that each lidar-
//! scan the same synthetic road scene, turns both clouds into bird's-eye-view
//! feature maps, and fuses the roadside features into the vehicle's detector.
//! Because the roadside message arrives late, the roadside unit transmits a
//! feature map together with its temporal derivative; the receiver
//! extrapolates the features to its own timestamp before fusing, which costs
//! a handful of elementwise ops instead of another network pass.
//!
//! Module map:
//! - [`autodiff`]: tape-based reverse-mode AD over flat `f32` buffers.
//! - [`geom`]: poses, BEV rectangles, rotated-box hulls.
//! - [`par`]: deterministic data-parallel loops (rayon behind the
//!   `parallel` feature, sequential otherwise).
//! - [`oracle`]: slow, obviously-correct f64 references used only by tests.
//! - [`gradcheck`]: finite-difference validation harness for every op.

pub mod autodiff;
pub mod comm;
pub mod error;
pub mod eval;
pub mod flow;
pub mod fusion;
pub mod geom;
pub mod gradcheck;
pub mod model;
pub mod oracle;
pub mod par;
pub mod pillars;
pub mod pipeline;
pub mod sim;
pub mod sweep;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
