//! Crate-wide error type.

use thiserror::Error;

use crate::bell::BellError;
use crate::coincidence::CoincidenceError;
use crate::config::ConfigError;
use crate::link::LinkError;
use crate::peak::PeakError;
use crate::ptag::PtagError;
use crate::rate::RateError;
use crate::source::SourceError;
use crate::sync::SyncError;
use crate::tagstream::TagError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    Ptag(#[from] PtagError),
    #[error(transparent)]
    Coincidence(#[from] CoincidenceError),
    #[error(transparent)]
    Peak(#[from] PeakError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Bell(#[from] BellError),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
