use serde::Serialize;
use thiserror::Error;

pub type Result<T, E = AuditError> = std::result::Result<T, E>;

/// Every failure the audit engine can report.
///
/// Each variant carries a stable machine-readable code (see [`AuditError::code`])
/// that the CLI and the HTTP service put in their JSON error payloads.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AuditError {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("card counts do not reconcile for {scope}: expected {expected}, found {found}")]
    MismatchedCounts {
        scope: String,
        expected: u64,
        found: u64,
    },

    #[error("tally does not reconcile for {scope}: expected {expected}, found {found}")]
    MismatchedTally {
        scope: String,
        expected: u64,
        found: u64,
    },

    #[error("reported winner {reported} disagrees with the totals, which elect {recomputed}")]
    WinnerDisagrees {
        reported: String,
        recomputed: String,
    },

    #[error("plurality tie between {0:?}")]
    Tie(Vec<String>),

    #[error("assertion {assertion} has non-positive margin {margin}")]
    NonpositiveMargin { assertion: String, margin: String },

    #[error("taint bound is zero")]
    DivisionByZeroBound,

    #[error("{what} lengths differ: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("value {value} outside [0, {upper}]")]
    Domain { value: String, upper: String },

    #[error("taint of one: the Kaplan-Markov test cannot conclude")]
    TaintAtOne,

    #[error("draw sequence exhausted")]
    Exhausted,

    #[error("ordinal {ordinal} outside [1, {total}]")]
    OutOfRange { ordinal: u64, total: u64 },

    #[error("all error bounds are zero")]
    AllZeroBounds,

    #[error("unknown card {0}")]
    UnknownCard(String),

    #[error("unknown group {0}")]
    UnknownGroup(String),

    #[error("ordinal {0} has not been drawn")]
    UnknownOrdinal(u64),

    #[error("ordinal {0} already has a recorded interpretation")]
    DuplicateRecord(u64),

    #[error("operation not allowed while the session is {status}")]
    WrongState { status: String },

    #[error("every card has been drawn; a full hand count is required")]
    FullCountRequired,

    #[error("full count incomplete: {missing} cards lack an interpretation")]
    Incomplete { missing: u64 },

    #[error("{file}:{line}:{column}: {message}")]
    Parse {
        file: String,
        line: u64,
        column: u64,
        message: String,
    },

    #[error("{file}: missing header row")]
    MissingHeader { file: String },

    #[error("{file}:{line}: duplicate id {id}")]
    DuplicateId { file: String, line: u64, id: String },

    #[error("transcript digest chain broken at line {line}")]
    ChainBroken { line: u64 },

    #[error("replay diverges from the transcript at seq {seq}")]
    Divergence { seq: u64 },

    #[error("missing cell: {0}")]
    MissingCell(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl AuditError {
    pub fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        AuditError::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            AuditError::Invalid { .. } => "INVALID_INPUT",
            AuditError::MismatchedCounts { .. } => "MISMATCHED_COUNTS",
            AuditError::MismatchedTally { .. } => "MISMATCHED_TALLY",
            AuditError::WinnerDisagrees { .. } => "WINNER_DISAGREES",
            AuditError::Tie(_) => "TIE",
            AuditError::NonpositiveMargin { .. } => "NONPOSITIVE_MARGIN",
            AuditError::DivisionByZeroBound => "DIVISION_BY_ZERO_BOUND",
            AuditError::LengthMismatch { .. } => "LENGTH_MISMATCH",
            AuditError::Domain { .. } => "DOMAIN",
            AuditError::TaintAtOne => "TAINT_AT_ONE",
            AuditError::Exhausted => "EXHAUSTED",
            AuditError::OutOfRange { .. } => "OUT_OF_RANGE",
            AuditError::AllZeroBounds => "ALL_ZERO_BOUNDS",
            AuditError::UnknownCard(_) => "UNKNOWN_CARD",
            AuditError::UnknownGroup(_) => "UNKNOWN_GROUP",
            AuditError::UnknownOrdinal(_) => "UNKNOWN_ORDINAL",
            AuditError::DuplicateRecord(_) => "DUPLICATE_RECORD",
            AuditError::WrongState { .. } => "WRONG_STATE",
            AuditError::FullCountRequired => "FULL_COUNT_REQUIRED",
            AuditError::Incomplete { .. } => "INCOMPLETE",
            AuditError::Parse { .. } => "PARSE_ERROR",
            AuditError::MissingHeader { .. } => "MISSING_HEADER",
            AuditError::DuplicateId { .. } => "DUPLICATE_ID",
            AuditError::ChainBroken { .. } => "CHAIN_BROKEN",
            AuditError::Divergence { .. } => "DIVERGENCE",
            AuditError::MissingCell(_) => "MISSING_CELL",
            AuditError::Io(_) => "IO_ERROR",
        }
    }

    /// The payload shared by the CLI (stderr) and the HTTP service (422 body).
    pub fn to_json(&self) -> ErrorPayload {
        ErrorPayload {
            error: self.code(),
            message: self.to_string(),
        }
    }
}

impl From<std::io::Error> for AuditError {
    fn from(err: std::io::Error) -> Self {
        AuditError::Io(err.to_string())
    }
}

impl Serialize for AuditError {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct ErrorPayload {
    pub error: &'static str,
    pub message: String,
}
