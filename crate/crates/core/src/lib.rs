pub mod attention;
pub mod cli;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod model;
pub mod normalize;
pub mod simulator;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use normalize::{NormAxis, Normalizer};
pub use tape::{Gradients, Tape, Var};
