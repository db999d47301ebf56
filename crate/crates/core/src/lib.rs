pub mod control;
pub mod error;
pub mod estimate;
pub mod harness;
pub mod kernel;
pub mod leader;
pub mod metrics;
pub mod micro;
pub mod pde;
pub mod pipeline;
pub mod ring;
pub mod shepherd;
pub mod transport;

pub use error::{Error, Result};
