//! Crate-level error type aggregating the per-module errors.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Objective(#[from] crate::objective::ObjectiveError),
    #[error(transparent)]
    Train(#[from] crate::pretrain::TrainError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Analysis(#[from] crate::analysis::AnalysisError),
    #[error(transparent)]
    Probe(#[from] crate::probe::ProbeError),
}
