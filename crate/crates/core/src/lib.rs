pub mod bsde;
pub mod calculus;
pub mod catalog;
pub mod dynamics;
pub mod error;
pub mod game;
pub mod hji;
pub mod path;
pub mod rng;

pub use error::{Error, Result};
