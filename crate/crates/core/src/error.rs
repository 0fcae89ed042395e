use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A loaded artifact violates one of its invariants.
    #[error("{invariant}: {detail}")]
    Validation {
        invariant: &'static str,
        detail: String,
    },
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("joint {joint} is not in front of the camera (z = {z})")]
    Projection { joint: usize, z: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unknown region {0:?}")]
    UnknownRegion(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(invariant: &'static str, detail: String) -> Error {
    Error::Validation { invariant, detail }
}
