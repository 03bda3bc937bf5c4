pub mod autodiff;
pub mod buffer;
pub mod config;
pub mod datasets;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod runner;
pub mod schedule;
pub mod tensor;
