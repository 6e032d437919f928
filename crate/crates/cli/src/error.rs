use std::path::Path;

use qlan::allocation::AllocationError;
use qlan::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// bad input or configuration; exit code 2
    #[error("{0}")]
    Validation(String),
    /// an MCMC chain failed its R-hat check; exit code 3
    #[error("{0}")]
    Convergence(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Convergence(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        if e.is_convergence_failure() {
            return CliError::Convergence(msg);
        }
        match e {
            Error::Config(_) | Error::Format(_) | Error::Optics(_) | Error::Coincidence(_) | Error::Tomography(_) => {
                CliError::Validation(msg)
            }
            Error::Allocation(AllocationError::Infeasible) => CliError::Runtime(msg),
            Error::Allocation(_) => CliError::Validation(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

macro_rules! via_lib_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}

via_lib_error!(
    qlan::config::ConfigError,
    qlan::timetag::FormatError,
    qlan::timetag::SimError,
    qlan::coincidence::CoincidenceError,
    qlan::tomography::TomographyError,
    qlan::allocation::AllocationError,
    qlan::experiment::ExperimentError,
    qlan::source::SourceError,
    qlan::optics::OpticsError
);

#[cfg(test)]
mod tests {
    use super::*;
    use qlan::experiment::ExperimentError;
    use qlan::tomography::TomographyError;

    #[test]
    fn exit_codes() {
        let conv = CliError::from(TomographyError::ChainNotConverged(1.3));
        assert_eq!(conv.exit_code(), 3);
        let nested = CliError::from(ExperimentError::Tomography(TomographyError::ChainNotConverged(1.2)));
        assert_eq!(nested.exit_code(), 3);
        let bad = CliError::from(TomographyError::InvalidOptions("x".into()));
        assert_eq!(bad.exit_code(), 2);
        assert_eq!(CliError::from(AllocationError::Infeasible).exit_code(), 1);
        assert_eq!(CliError::from(AllocationError::MissingChannel(3)).exit_code(), 2);
    }
}
