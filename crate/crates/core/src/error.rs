use std::fmt;

use thiserror::Error;

/// Location inside an input file, used in load errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    /// 1-based line number in a text file.
    Line(usize),
    /// Byte offset in a binary file.
    Byte(u64),
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Position::Line(line) => write!(f, "line {line}"),
            Position::Byte(offset) => write!(f, "byte {offset}"),
        }
    }
}

/// Failure while decoding one of the on-disk formats.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("bad magic at {0}: expected {1:?}")]
    BadMagic(Position, &'static str),
    #[error("unsupported version {version} at {position}")]
    UnsupportedVersion { position: Position, version: u32 },
    #[error("malformed header at {position}: {message}")]
    MalformedHeader { position: Position, message: String },
    #[error("row width mismatch at {position}: expected {expected} fields, found {found}")]
    RowWidth {
        position: Position,
        expected: usize,
        found: usize,
    },
    #[error("label {label} out of range (n_classes = {n_classes}) at {position}")]
    LabelOutOfRange {
        position: Position,
        label: u64,
        n_classes: usize,
    },
    #[error("group {group} out of range (n_groups = {n_groups}) at {position}")]
    GroupOutOfRange {
        position: Position,
        group: u64,
        n_groups: usize,
    },
    #[error("non-finite value at {0}")]
    NonFinite(Position),
    #[error("unparsable field {field:?} at {position}")]
    Parse { position: Position, field: String },
    #[error("file truncated at {0}")]
    Truncated(Position),
    #[error("trailing data at {0}")]
    TrailingData(Position),
}

#[derive(Debug, Error)]
pub enum DfrError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("group {group} has no rows")]
    EmptyGroup { group: usize },
    #[error("group {group} has {count} rows, fewer than the {parts} split parts")]
    GroupTooSmall {
        group: usize,
        count: usize,
        parts: usize,
    },
    #[error("class {class} has no examples")]
    MissingClass { class: usize },
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("incompatible heads: {0}")]
    HeadMismatch(String),
}

pub type Result<T, E = DfrError> = std::result::Result<T, E>;
