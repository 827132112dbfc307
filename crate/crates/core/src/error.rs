use thiserror::Error;

/// Errors raised by the allocation algorithms and the signal model.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("no positive root of f(g) = g f'(g) for packet size M = {0} (no positive root for M<2)")]
    NoPositiveRoot(u32),

    #[error("user index {index} out of range for {users} active users")]
    UserIndex { index: usize, users: usize },

    #[error("user {0} has zero transmit power; its receive filter is undefined")]
    DegenerateUser(usize),

    #[error("user {0} has a receive filter orthogonal to its code and cannot be served")]
    UnservableUser(usize),

    #[error("receive filter of user {0} is the zero vector")]
    ZeroFilter(usize),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("non-finite value at symbol {symbol}: {what}")]
    NonFinite { symbol: usize, what: String },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
