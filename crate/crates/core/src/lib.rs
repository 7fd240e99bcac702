pub mod config;
pub mod curvature;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod gauge;
pub mod grid;
pub mod jet;
pub mod symbol;

pub use error::{Error, Result};
