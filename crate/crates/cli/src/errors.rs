//! Failure classes that map to process exit codes.

use std::fmt;

use crate::config::ConfigError;

/// Malformed or missing input files found by the harness itself.
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "data error: {}", self.0)
    }
}

impl std::error::Error for DataError {}

/// A metric or loss that came out NaN or infinite.
#[derive(Debug)]
pub struct NumericalError(pub String);

impl fmt::Display for NumericalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "numerical failure: {}", self.0)
    }
}

impl std::error::Error for NumericalError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Exit code for the first classifiable cause in the error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use rtransfer_core::Error as Core;
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<clap::Error>() {
            return EXIT_CONFIG;
        }
        if cause.is::<DataError>() || cause.is::<csv::Error>() {
            return EXIT_DATA;
        }
        if cause.is::<NumericalError>() {
            return EXIT_NUMERICAL;
        }
        if let Some(e) = cause.downcast_ref::<Core>() {
            return if e.is_numerical() {
                EXIT_NUMERICAL
            } else if e.is_data() {
                EXIT_DATA
            } else if matches!(e, Core::Config(_) | Core::BnPolicy(_) | Core::InvalidArgument(_)) {
                EXIT_CONFIG
            } else {
                EXIT_OTHER
            };
        }
    }
    EXIT_OTHER
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causes_map_to_documented_codes() {
        let c = anyhow::Error::new(ConfigError("x".into())).context("loading");
        assert_eq!(exit_code(&c), EXIT_CONFIG);
        let d = anyhow::Error::new(rtransfer_core::Error::Data("short".into()));
        assert_eq!(exit_code(&d), EXIT_DATA);
        let n = anyhow::Error::new(rtransfer_core::Error::NonFinite { op: "relu".into() });
        assert_eq!(exit_code(&n), EXIT_NUMERICAL);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), EXIT_OTHER);
    }
}
