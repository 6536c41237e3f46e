use std::path::PathBuf;

use snp_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u16, expected: u16 },
    #[error("truncated payload: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("config: {0}")]
    Config(String),
    #[error("missing metrics: {}", .0.join(", "))]
    MissingMetrics(Vec<String>),
    #[error("non-finite loss at iteration {iteration}; last good checkpoint: {checkpoint}")]
    NonFinite { iteration: u64, checkpoint: String },
    #[error("metrics log: {0}")]
    Metrics(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| HarnessError::Io {
            path: path.into(),
            source,
        })
    }
}
