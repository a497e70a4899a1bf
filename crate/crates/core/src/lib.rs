//! Spatio-temporal epidemic forecasting with graph-prompted tokens and a
//! shared, frozen sequence backbone.
//!
//! The library is generic over the floating point type through [`Scalar`];
//! the aliases at the bottom of this file fix it to `f64`, which is what the
//! command line tool and the checkpoint format use.

pub mod autodiff;
pub mod backbone;
pub mod branches;
pub mod checkpoint;
pub mod epidata;
pub mod eval;
pub mod forecaster;
mod init;
pub mod layers;
pub mod model;
pub mod prompt;
pub mod scalar;
pub mod tensor;
pub mod trainer;

use std::path::PathBuf;

pub use scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] epidata::DataError),
    #[error(transparent)]
    Graph(#[from] autodiff::GraphError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("forecast produced a non-finite value at step {step}")]
    NonFiniteForecast { step: usize },
    #[error("model has no trainable parameters")]
    EmptyModel,
    #[error("no metric reports to emit")]
    EmptyReport,
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Tensor64 = tensor::Tensor<f64>;
pub type Dataset = epidata::EpidemicDataset<f64>;
pub type Model = model::EpiModel<f64>;
pub type Params = autodiff::ParamStore<f64>;
