pub mod autodiff;
pub mod ba_unet;
pub mod error;
mod interp;
pub mod manifest;
pub mod metrics;
pub mod phantom;
pub mod preprocess;
pub mod pseudo_mask;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
