//! Adaptive-depth message passing for node classification.
//!
//! A message-passing network that emits a class prediction after every
//! layer, two ways to train it (joint aggregate loss or layer-by-layer with
//! freezing), and a centrality-bucket policy that picks an exit layer per
//! node.

pub mod ad;
pub mod centrality;
pub mod dataset;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod policy;
pub mod report;
pub mod train;

use thiserror::Error;

/// Any failure surfaced by the library, grouped by cause.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] dataset::DataError),
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Policy(#[from] policy::PolicyError),
    #[error(transparent)]
    Centrality(#[from] centrality::CentralityError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numerical => 3,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use centrality::CentralityError as C;
        use model::ModelError as M;
        use train::TrainError as T;
        let model = |e: &M| match e {
            M::NonFinite { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        };
        match self {
            Error::Usage(_) => ErrorClass::Usage,
            Error::Train(T::Config(_)) => ErrorClass::Usage,
            Error::Train(T::Diverged { .. }) => ErrorClass::Numerical,
            Error::Train(T::Model(e)) | Error::Model(e) => model(e),
            Error::Data(dataset::DataError::Train(T::Diverged { .. })) => ErrorClass::Numerical,
            Error::Centrality(C::NoConvergence { .. }) => ErrorClass::Numerical,
            Error::Centrality(
                C::Damping(_) | C::TooManyBuckets { .. } | C::ZeroBuckets | C::UnknownMetric(_),
            ) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}
