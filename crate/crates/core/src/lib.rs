//! Layout-based action recognition: the spatial-temporal layout transformer,
//! layout/appearance fusion schemes, a synthetic layout-action benchmark and
//! a training and evaluation harness.

pub mod error;
pub mod fusion;
pub mod harness;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod synthetic;

pub use error::{Result, StltError};
