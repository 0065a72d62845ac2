//! Dual-domain low-dose CT reconstruction toolkit.

pub mod config;
pub mod dgdiff;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod physics;
pub mod pipeline;
pub mod projection;
pub mod rng;
pub mod spdiff;

pub use error::{Error, Result};
pub use image::{HuWindow, Image};
pub use projection::Projection;
pub use rng::Rng;
