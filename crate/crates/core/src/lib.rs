//! Second-stage refinement of 3D bounding boxes from LiDAR-style point clouds.
//!
//! Given proposals from any first-stage detector, this crate crops the points
//! around each proposal into its canonical frame, encodes them with one of
//! several size-aware per-point feature variants, and runs a small
//! shared-MLP/max-pool network (trained from scratch, hand-written
//! forward/backward) that rescores each proposal and regresses a corrected
//! box. Detection metrics (AP and heading-weighted APH over difficulty
//! levels and distance ranges) and a synthetic scene generator for
//! desk-scale experiments are included.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the `std` feature
//! (default) enables platform float math and the timing helpers, and the
//! `parallel` feature adds multi-threaded batch processing with
//! run-deterministic reductions.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod encoding;
pub mod geometry;
pub mod metrics;
pub mod network;
pub mod synthetic;
pub mod targets;
pub mod trainer;

pub use geometry::{Box7, Point3, PointCloud};
pub use network::{PointNetModel, Scalar};
