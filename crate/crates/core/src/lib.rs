pub mod aggregate;
pub mod attack;
pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
