use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", join(.0))]
    Config(Vec<ConfigError>),

    #[error("{axis} axis of size {size} is not divisible by {divisor}")]
    Divisibility {
        axis: &'static str,
        size: usize,
        divisor: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mask ratio {0} outside the open interval (0, 1)")]
    MaskRatio(f64),

    #[error("mask selects no tokens; masked loss is undefined")]
    EmptyMask,

    #[error("confusion matrix has no scored pixels")]
    EmptyConfusion,

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("incompatible checkpoint: {}", .0.join("; "))]
    Incompatible(Vec<String>),

    #[error("corrupt file: {0}")]
    Format(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn join(errs: &[ConfigError]) -> String {
    errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
