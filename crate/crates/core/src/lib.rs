pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod picker;
pub mod preprocess;
pub mod regional;
pub mod signal_store;
pub mod site_class;

pub use error::{Error, Result};
