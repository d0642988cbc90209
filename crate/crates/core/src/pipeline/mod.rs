//! End-to-end orchestration: configuration, image ingestion, dataset
//! manifests, synthetic data, training, cross-validation, evaluation and
//! explanation.

pub mod config;
pub mod dataset;
pub mod explain;
pub mod fetch;
pub mod synth;
pub mod train;

use thiserror::Error;

use crate::attribution::AttributionError;
use crate::catalog::{CatalogError, Label};
use crate::evaluation::EvalError;
use crate::model::ModelError;
use crate::tensor::TensorError;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("{line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("training split has no {0} samples")]
    EmptyClass(Label),
    #[error("numerical property violated: {0}")]
    Property(String),
    #[error("request failed: {0}")]
    Http(String),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
}

impl PipelineError {
    /// True for failures of a checked numerical property (as opposed to bad
    /// input data or I/O).
    pub fn is_property_violation(&self) -> bool {
        matches!(
            self,
            PipelineError::Property(_)
                | PipelineError::Attribution(AttributionError::Completeness { .. })
                | PipelineError::Tensor(TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
