//! Force–displacement–vibration–velocity (FDVV) button modeling and
//! simulation: capture ingestion, B-spline model fitting with order
//! selection, iterative compensation against a virtual actuator, 1 kHz press
//! rendering, vibration templates and Bayesian design optimization.

pub mod actuation;
pub mod bspline;
pub mod capture;
pub mod compensation;
pub mod grid;
pub mod model;
pub mod optimizer;
pub mod pipeline;
pub mod plant;
pub mod render;
pub mod smoothing;
pub mod synth;
pub mod vibration;

/// Longest keycap travel the system renders (mm).
pub const MAX_TRAVEL_MM: f64 = 6.2;
