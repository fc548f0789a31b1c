pub mod convnet;
pub mod error;
pub mod field_synth;
pub mod gp_model;
pub mod grid;
pub mod io;
pub mod knn;
pub mod linalg;
pub mod par;
pub mod pipeline;

pub use error::{Error, Result};
