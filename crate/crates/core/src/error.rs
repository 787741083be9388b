use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::backend::BackendError;
use crate::datasets::DatasetError;
use crate::metrics::MetricError;
use crate::pooling::PoolingError;
use crate::store::StoreError;
use crate::templates::TemplateError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("backend `{0}` has no mask token; the mask sweep needs a discriminative model")]
    BackendNotMaskCapable(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Backend,
    Data,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Backend => 3,
            ErrorKind::Data => 4,
        }
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::BackendNotMaskCapable(_) => ErrorKind::Config,
            Error::Template(TemplateError::EmptySentence) => ErrorKind::Data,
            Error::Template(_) => ErrorKind::Config,
            Error::Dataset(DatasetError::ThresholdOutOfRange(_) | DatasetError::UnknownBenchmark(_)) => {
                ErrorKind::Config
            }
            Error::Backend(_) | Error::Pooling(_) => ErrorKind::Backend,
            Error::Analysis(AnalysisError::LayerMissing(_)) => ErrorKind::Backend,
            Error::Dataset(_) | Error::Metric(_) | Error::Store(_) | Error::Analysis(_) => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
