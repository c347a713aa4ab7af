use thiserror::Error;

/// Errors raised by the model, adaptation, edge, cloud and harness layers.
///
/// Wire-level decode failures have their own type, [`crate::wire::DecodeError`],
/// and are wrapped here when they surface through a session.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("non-finite loss in {stage}; offending sample ids: {sample_ids:?}")]
    NonFiniteLoss {
        stage: &'static str,
        sample_ids: Vec<u64>,
    },

    #[error("incompatible parameter set: {0}")]
    Incompatible(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stream file error: {0}")]
    StreamFile(String),

    #[error("pretraining failed: {0}")]
    Training(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Decode(#[from] crate::wire::DecodeError),

    #[error(transparent)]
    Encode(#[from] crate::wire::EncodeError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
