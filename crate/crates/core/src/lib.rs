//! Learned lateral control in a 2D kinematic driving simulator.
//!
//! A tuned PID expert drives procedurally generated tracks while a simulated
//! LIDAR suite records range scans and the expert's steering. Those samples
//! train two steering regressors, a bagged CART random forest and a
//! fully connected ReLU network, which are then driven on a held-out track.
//! The forest's ensemble spread (standard deviation, coefficient of
//! variation, odd count) feeds a [`supervisor`] that hands control back to
//! the PID expert or to a human connected through the [`telemetry`] socket.

pub mod dataset;
pub mod driver;
pub mod episode;
pub mod error;
pub mod experiment;
pub mod forest;
pub mod geometry;
pub mod lidar;
pub mod manifest;
pub mod mlp;
pub mod pid;
pub mod supervisor;
pub mod telemetry;
pub mod track;
pub mod trackgen;
pub mod vehicle;

pub use error::{Error, Result};
pub use geometry::Vec2;
