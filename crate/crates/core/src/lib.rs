//! Episodic spatial world model: hexagonal environments, spanning-forest
//! memory banks, a masked-transition sequence model, and the planning and
//! analysis tools built on top of it.

pub mod agents;
pub mod analysis;
pub mod episodic;
pub mod error;
pub mod harness;
pub mod hexgrid;
pub mod model;
pub mod seed;

pub use error::{Error, Result};

/// Single-precision model used for training and inference.
pub type Eswm32 = model::Eswm<f32>;
/// Double-precision model used for numerical checks.
pub type Eswm64 = model::Eswm<f64>;
