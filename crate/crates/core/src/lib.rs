pub mod error;
pub mod data;
pub mod numerics;
pub mod riskadjust;
pub mod did;
pub mod inference;
pub mod effects;
pub mod sim;
pub mod cli;

pub use error::{Error, Result};
