pub mod autodiff;
pub mod backbone;
mod binio;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod replay;
pub mod report;
pub mod rng;
pub mod task_attention;
pub mod trainer;

pub use error::{Error, Result};
