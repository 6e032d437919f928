//! Simulation and analysis toolkit for a flex-grid entanglement-distribution
//! quantum LAN.

pub mod allocation;
pub mod coincidence;
pub mod config;
pub mod experiment;
pub mod optics;
pub mod qmath;
pub mod rsp;
pub mod seed;
pub mod source;
pub mod timetag;
pub mod tomography;

use thiserror::Error;

/// Any error raised by the library, for callers that do not care which
/// stage failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Math(#[from] qmath::MathError),
    #[error(transparent)]
    Optics(#[from] optics::OpticsError),
    #[error(transparent)]
    Source(#[from] source::SourceError),
    #[error(transparent)]
    Sim(#[from] timetag::SimError),
    #[error(transparent)]
    Format(#[from] timetag::FormatError),
    #[error(transparent)]
    Coincidence(#[from] coincidence::CoincidenceError),
    #[error(transparent)]
    Tomography(#[from] tomography::TomographyError),
    #[error(transparent)]
    Allocation(#[from] allocation::AllocationError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Rsp(#[from] rsp::RspError),
    #[error(transparent)]
    Experiment(#[from] experiment::ExperimentError),
}

impl Error {
    /// True when the failure is an MCMC chain that did not converge.
    pub fn is_convergence_failure(&self) -> bool {
        matches!(
            self,
            Error::Tomography(tomography::TomographyError::ChainNotConverged(_))
                | Error::Experiment(experiment::ExperimentError::Tomography(
                    tomography::TomographyError::ChainNotConverged(_)
                ))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
