//! Estimation core for following a moving ground target from a UAV with a
//! single nadir-tilted camera.
//!
//! The crate provides the building blocks of the localization pipeline and a
//! synthetic scene generator to exercise them end to end:
//!
//! * [`geometry`]: poses, pinhole projection, rays, planes, two-view inverse
//!   depth.
//! * [`grid`]: dense raster storage plus the on-disk float/mask grid format.
//! * [`roi`]: feature depth tracking on a 3x3 grid around the target box.
//! * [`scale`]: affine recovery of metric scale for relative depth maps.
//! * [`segmentation`]: tile-based ground extraction by seeded region growing.
//! * [`planes`]: multi-hypothesis robust plane fitting and temporal fusion.
//! * [`localizer`]: target fix by ray-casting the lifted ground plane.
//! * [`trajectory`]: damped constant-acceleration Kalman filter.
//! * [`peak`]: trajectory-guided peak selection on tracker score maps.
//! * [`sim`]: synthetic terrains, flights and score maps with known ground
//!   truth.
//! * [`pipeline`]: per-frame orchestration of all of the above.

pub mod geometry;
pub mod grid;
pub mod localizer;
pub mod peak;
pub mod pipeline;
pub mod planes;
pub mod roi;
pub mod scale;
pub mod segmentation;
pub mod sim;
pub mod trajectory;
