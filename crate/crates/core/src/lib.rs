pub mod check;
pub mod data;
pub mod error;
pub mod evalrep;
pub mod hiermud;
pub mod nn;
pub mod preprocess;
pub mod sim;
pub mod validate;

pub use error::{Error, Result};
