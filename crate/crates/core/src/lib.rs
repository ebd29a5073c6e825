pub mod app;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod maps;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod render;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
