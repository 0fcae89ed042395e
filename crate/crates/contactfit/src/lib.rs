//! File formats, the model gateway, synthetic scenes and the end-to-end
//! pipeline around `contactfit-core`.

pub mod assets;
pub mod error;
pub mod gateway;
pub mod io;
pub mod pipeline;
pub mod scene;
pub mod synth;

pub use error::{AppError, Result};
