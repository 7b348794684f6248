use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid size {0} is not supported (must be even and at least 4)")]
    InvalidGrid(usize),
    #[error("grid mismatch: {0} vs {1}")]
    GridMismatch(usize, usize),
    #[error("vorticity mean {0:.3e} is not zero")]
    NonzeroMean(f64),
    #[error("sobolev index {m} exceeds cap {cap}")]
    SobolevIndex { m: usize, cap: usize },
    #[error("non-finite state at t = {t}")]
    Blowup { t: f64 },
    #[error("invalid domain ({a}, {b}): need 0 <= a < b <= 2*pi")]
    InvalidDomain { a: f64, b: f64 },
    #[error("partition needs K = {k} strips, above the cap {max}")]
    PartitionTooFine { k: usize, max: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
