use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A NaN or infinity reached a loss or a gradient; the string names the site.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("inconsistent label: {0}")]
    Label(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 1 = usage/config, 2 = data, 3 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::NonFinite(_) => 3,
            Error::Shape(_)
            | Error::Degenerate(_)
            | Error::Label(_)
            | Error::Data(_)
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::Image { .. } => 2,
        }
    }
}
