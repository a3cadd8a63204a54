use bisgml_core::Error;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("peak resident memory {peak_mb:.1} MB exceeded predict.memory_bound_mb = {bound_mb}")]
    MemoryBound { peak_mb: f64, bound_mb: f64 },
}

impl CliError {
    /// 1 I/O and other failures, 2 configuration, 3 data, 4 leakage,
    /// 5 divergence.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Config(_)) => 2,
            CliError::Core(Error::Data(_) | Error::UndefinedMetric(_)) => 3,
            CliError::Core(Error::Leakage(_)) => 4,
            CliError::Core(Error::Divergence(_)) => 5,
            _ => 1,
        }
    }
}
