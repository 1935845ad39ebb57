pub mod allocator;
pub mod convexity;
pub mod error;
pub mod model;
pub mod report;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
