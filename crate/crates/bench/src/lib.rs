//! Training, evaluation, ablation and timing runs over the `ofql-core`
//! stack, writing CSV and JSON artifacts.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod presets;
pub mod timing;

pub use config::{Axis, Command, Family, RunConfig, Strategy};

/// Failure classes, mapped to process exit codes by the binary.
#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Run(String),
}

impl BenchError {
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 1,
            BenchError::Run(_) => 2,
        }
    }
}

impl From<ofql_core::Error> for BenchError {
    fn from(e: ofql_core::Error) -> Self {
        BenchError::Run(e.to_string())
    }
}

impl From<std::io::Error> for BenchError {
    fn from(e: std::io::Error) -> Self {
        BenchError::Run(e.to_string())
    }
}

impl From<csv::Error> for BenchError {
    fn from(e: csv::Error) -> Self {
        BenchError::Run(e.to_string())
    }
}

impl From<serde_json::Error> for BenchError {
    fn from(e: serde_json::Error) -> Self {
        BenchError::Run(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
