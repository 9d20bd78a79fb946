pub mod annotate;
pub mod backbone;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod metrics;
pub mod numcore;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use numcore::{Graph, Rng, Tensor, Var};
