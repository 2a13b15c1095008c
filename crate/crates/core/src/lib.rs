pub mod attention;
pub mod autodiff;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod losses;
pub mod noiseopt;
pub mod scene;
pub mod toymodel;

pub use error::{Error, Result};
pub mod eval;
pub mod synthetic;
pub mod pipeline;
