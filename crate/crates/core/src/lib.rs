//! Attentional text-to-image generation from Bangla captions at desk scale.

pub mod attention;
pub mod damsm;
pub mod encoders;
pub mod error;
pub mod gan;
pub mod image;
pub mod metrics;
pub mod numerics;
pub mod textdata;

pub use error::{Error, Result};
