pub mod blending;
pub mod error;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod perception;
pub mod pipeline;
#[cfg(test)]
pub(crate) mod testutil;
pub mod video;

pub use error::{Error, Result};
