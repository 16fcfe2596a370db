use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("non-finite value {0} cannot be quantized")]
    NonFinite(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible accumulator budget: P={p_bits}, N={act_bits} leaves limit {limit} <= 0")]
    InfeasibleBudget {
        p_bits: u32,
        act_bits: u32,
        limit: f64,
    },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("Hessian factorization failed at pivot {pivot}: {reason}")]
    Factorization { pivot: usize, reason: String },

    #[error("tensor file {path}: bad magic {found:?}, expected \"AXT1\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("tensor file {path}: unknown dtype code {code}")]
    BadDtype { path: PathBuf, code: u8 },

    #[error("tensor file {path}: truncated ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, QuantError>;
