//! Files, checkpoints, and commands around `taugen-core`.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fsutil;
pub mod pipeline;
pub mod pngio;
pub mod report;

pub use config::RunConfig;
pub use error::{AppError, AppResult};
