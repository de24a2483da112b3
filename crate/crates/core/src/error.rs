use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// The byte stream is not a well-formed RIFF/WAVE container.
    #[error("malformed WAV data: {0}")]
    Format(String),
    /// The container is valid but uses an encoding this crate does not decode.
    #[error("unsupported audio encoding: {0}")]
    UnsupportedCodec(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    /// An input is too small for the requested operation.
    #[error("input too short: {0}")]
    InputTooShort(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A front-end stage failed while preparing a dataset item.
    #[error("front-end failed on clip {index}: {source}")]
    Frontend {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    /// A binary container or text file could not be parsed.
    #[error("invalid container: {0}")]
    Container(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by the caller's data or parameters rather than
    /// by the environment (I/O) or by unreadable files.
    pub fn is_domain(&self) -> bool {
        match self {
            Error::Io(_) | Error::Container(_) => false,
            Error::Frontend { source, .. } => source.is_domain(),
            _ => true,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
