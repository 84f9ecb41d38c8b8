use thiserror::Error;

/// Domain errors surfaced by every store operation.
///
/// [`Error::code`] returns the stable upper-case name used on the command line
/// and in test assertions.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("role instructions must not be empty")]
    EmptyInstructions,
    #[error("invalid capability name {0:?}")]
    InvalidCapability(String),
    #[error("unknown definition {0}")]
    UnknownDefinition(String),
    #[error("definition {0} has no version {1}")]
    UnknownVersion(String, u64),
    #[error("invalid key {0:?}")]
    InvalidKey(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("unknown layer {0}")]
    UnknownLayer(String),
    #[error("unknown overlay {0}")]
    UnknownOverlay(String),
    #[error("overlay {0} was folded into {1} by compaction")]
    OverlayCompacted(String, String),
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("parent instance {0} is retired")]
    RetiredParent(String),
    #[error("instance {0} is retired")]
    RetiredInstance(String),
    #[error("instance {0} still has live children")]
    HasLiveChildren(String),
    #[error("capabilities {0:?} are not held by the parent scope")]
    CapabilityWidening(Vec<String>),
    #[error("{0} is not an ancestor of {1}")]
    NotAnAncestor(String, String),
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("journal gap: expected seq {expected}, found {found}")]
    GapInJournal { expected: u64, found: u64 },
    #[error("malformed journal record: {0}")]
    MalformedRecord(String),
    #[error("replay target seq {0} is beyond the journal end {1}")]
    SeqOutOfRange(u64, u64),
    #[error("invalid benchmark spec: {0}")]
    InvalidSpec(String),
    #[error("store is locked by another process: {0}")]
    StoreLocked(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyInstructions => "EMPTY_INSTRUCTIONS",
            Error::InvalidCapability(_) => "INVALID_CAPABILITY",
            Error::UnknownDefinition(_) => "UNKNOWN_DEFINITION",
            Error::UnknownVersion(..) => "UNKNOWN_VERSION",
            Error::InvalidKey(_) => "INVALID_KEY",
            Error::InvalidValue(_) => "INVALID_VALUE",
            Error::UnknownLayer(_) => "UNKNOWN_LAYER",
            Error::UnknownOverlay(_) => "UNKNOWN_OVERLAY",
            Error::OverlayCompacted(..) => "OVERLAY_COMPACTED",
            Error::UnknownInstance(_) => "UNKNOWN_INSTANCE",
            Error::RetiredParent(_) => "RETIRED_PARENT",
            Error::RetiredInstance(_) => "RETIRED_INSTANCE",
            Error::HasLiveChildren(_) => "HAS_LIVE_CHILDREN",
            Error::CapabilityWidening(_) => "CAPABILITY_WIDENING",
            Error::NotAnAncestor(..) => "NOT_AN_ANCESTOR",
            Error::StorageFailure(_) => "STORAGE_FAILURE",
            Error::GapInJournal { .. } => "GAP_IN_JOURNAL",
            Error::MalformedRecord(_) => "MALFORMED_RECORD",
            Error::SeqOutOfRange(..) => "SEQ_OUT_OF_RANGE",
            Error::InvalidSpec(_) => "INVALID_SPEC",
            Error::StoreLocked(_) => "STORE_LOCKED",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
