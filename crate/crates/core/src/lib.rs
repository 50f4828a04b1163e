pub mod calibrate;
pub mod codec;
pub mod colorlab;
pub mod denoiser;
pub mod edges;
pub mod embed;
pub mod error;
pub mod io;
pub mod params;
pub mod sampler;
pub mod training;
pub mod workflows;

pub use error::{CdstError, Result};
