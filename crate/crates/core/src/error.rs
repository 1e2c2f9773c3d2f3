use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box [{x0}, {y0}, {x1}, {y1}]: {reason}")]
    InvalidBox {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        reason: &'static str,
    },

    #[error("nms input mixes frames {first} and {other}")]
    MixedFrames { first: u32, other: u32 },

    #[error("box lies outside the {width}x{height} frame")]
    DegenerateAfterClamp { width: u32, height: u32 },

    #[error("{}:{line}: field `{field}`: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("flow file {}: {message}", path.display())]
    Flow { path: PathBuf, message: String },

    #[error("missing {direction} flow for clip `{clip}` frame {frame}")]
    MissingFlow {
        clip: String,
        frame: u32,
        direction: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("stage `{stage}` ({context}): {source}")]
    Stage {
        stage: &'static str,
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 1,
            Error::Invariant(_) => 3,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
