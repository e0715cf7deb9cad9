pub mod bayes;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod models;
pub mod nn;
pub mod resample;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::{Graph, Tensor, Var};
