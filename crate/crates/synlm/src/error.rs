use std::path::Path;

use synlm_core::beam::BeamError;
use synlm_core::eval::EvalError;
use synlm_core::model::ModelError;
use synlm_core::synthdata::SynthError;
use synlm_core::transitions::TransitionError;
use synlm_core::tree::TreeError;
use synlm_core::vocab::VocabError;

/// Every failure maps onto one process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) => 2,
            Error::Numeric(_) => 3,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Error::Data(format!("{}: {e}", path.display()))
    }
}

impl From<ModelError> for Error {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite => Error::Numeric(e.to_string()),
            ModelError::Config(_) => Error::Usage(e.to_string()),
            _ => Error::Data(e.to_string()),
        }
    }
}

impl From<BeamError> for Error {
    fn from(e: BeamError) -> Self {
        match e {
            BeamError::Numeric => Error::Numeric(e.to_string()),
            BeamError::Config(_) => Error::Usage(e.to_string()),
            BeamError::Model(m) => m.into(),
            _ => Error::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for Error {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Beam(b) => b.into(),
            EvalError::Model(m) => m.into(),
            _ => Error::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Error {
            fn from(e: $t) -> Self {
                Error::Data(e.to_string())
            }
        }
    )*};
}

data_error!(TreeError, TransitionError, VocabError, SynthError, serde_json::Error);
