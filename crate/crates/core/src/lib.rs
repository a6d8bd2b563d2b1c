//! Multi-camera 3D object tracking.

pub mod calibration;
pub mod camera;
pub mod error;
pub mod scene_io;
pub mod simulator;
pub mod spawner;
pub mod tracker;

pub use error::{Error, Result};
