pub mod basis;
pub mod bench;
pub mod checks;
pub mod dgp;
pub mod edf;
pub mod error;
pub mod estimators;
pub mod io;
pub mod model;
pub mod netcore;
pub mod objective;
pub mod seeds;

pub use error::{Error, Result};
