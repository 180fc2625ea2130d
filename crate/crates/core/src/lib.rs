//! Dark-frame noise calibration and a learned per-pixel noise proxy.
//!
//! The pipeline: capture (or simulate) dark frames, fit and strip structured
//! frame-level and band noise, train a small dual-branch network to reproduce
//! the remaining pixel-wise noise, then synthesize noisy/clean training pairs.

pub mod cli;
pub mod ddl;
pub mod error;
pub mod eval;
pub mod frame;
pub mod pnd;
pub mod ppm;
pub mod rng;
pub mod sensor;
pub mod stats;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use frame::{FrameSet, Iso, Plane, RawFrame};
pub use ppm::ProxyModel;
pub use sensor::{build_sensor, Components, GroundTruthSensor, SensorSpec};
