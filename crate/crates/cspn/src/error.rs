//! Command failures and their exit codes: 1 validation, 2 numeric, 3 I/O.

use std::fmt;

use cspn_core::abcspn::AbcspnError;
use cspn_core::circuit::CircuitError;
use cspn_core::citest::CiError;
use cspn_core::data::DataError;
use cspn_core::learn::LearnError;
use cspn_core::leaves::LeafError;
use cspn_core::optimize::OptError;

use crate::abcspn_io::AbcspnIoError;
use crate::images::ImageIoError;
use crate::model_io::ModelIoError;
use crate::tabular::TabularError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numeric,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 1,
            ErrorKind::Numeric => 2,
            ErrorKind::Io => 3,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ErrorKind::Validation => "validation",
            ErrorKind::Numeric => "numeric",
            ErrorKind::Io => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Validation, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Io, message: message.into() }
    }

    fn of(kind: ErrorKind, e: impl fmt::Display) -> Self {
        CliError { kind, message: e.to_string() }
    }
}

/// One line: `error[<kind>]: <message>`, newlines flattened.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.kind.tag(), self.message.replace('\n', " "))
    }
}

impl std::error::Error for CliError {}

fn leaf_kind(e: &LeafError) -> ErrorKind {
    match e {
        LeafError::Numeric(_) => ErrorKind::Numeric,
        _ => ErrorKind::Validation,
    }
}

fn circuit_kind(e: &CircuitError) -> ErrorKind {
    match e {
        CircuitError::Numeric { .. } => ErrorKind::Numeric,
        CircuitError::Leaf { source, .. } => leaf_kind(source),
        _ => ErrorKind::Validation,
    }
}

fn ci_kind(e: &CiError) -> ErrorKind {
    match e {
        CiError::Numeric(_) => ErrorKind::Numeric,
        _ => ErrorKind::Validation,
    }
}

fn learn_kind(e: &LearnError) -> ErrorKind {
    match e {
        LearnError::Leaf { source, .. } => leaf_kind(source),
        LearnError::Ci { source, .. } => ci_kind(source),
        LearnError::Circuit(c) => circuit_kind(c),
        _ => ErrorKind::Validation,
    }
}

impl From<CircuitError> for CliError {
    fn from(e: CircuitError) -> Self {
        CliError::of(circuit_kind(&e), e)
    }
}

impl From<CiError> for CliError {
    fn from(e: CiError) -> Self {
        CliError::of(ci_kind(&e), e)
    }
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        CliError::of(learn_kind(&e), e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::of(ErrorKind::Validation, e)
    }
}

impl From<OptError> for CliError {
    fn from(e: OptError) -> Self {
        let kind = match &e {
            OptError::Diverged { .. } | OptError::NanGradient { .. } => ErrorKind::Numeric,
            OptError::Circuit(c) => circuit_kind(c),
            _ => ErrorKind::Validation,
        };
        CliError::of(kind, e)
    }
}

impl From<AbcspnError> for CliError {
    fn from(e: AbcspnError) -> Self {
        let kind = match &e {
            AbcspnError::Learn { source, .. } => learn_kind(source),
            AbcspnError::Circuit { source, .. } => circuit_kind(source),
            _ => ErrorKind::Validation,
        };
        CliError::of(kind, e)
    }
}

impl From<TabularError> for CliError {
    fn from(e: TabularError) -> Self {
        let kind = if matches!(e, TabularError::Io { .. }) { ErrorKind::Io } else { ErrorKind::Validation };
        CliError::of(kind, e)
    }
}

impl From<ModelIoError> for CliError {
    fn from(e: ModelIoError) -> Self {
        let kind = if matches!(e, ModelIoError::Io { .. }) { ErrorKind::Io } else { ErrorKind::Validation };
        CliError::of(kind, e)
    }
}

impl From<ImageIoError> for CliError {
    fn from(e: ImageIoError) -> Self {
        let kind = if matches!(e, ImageIoError::Io { .. }) { ErrorKind::Io } else { ErrorKind::Validation };
        CliError::of(kind, e)
    }
}

impl From<AbcspnIoError> for CliError {
    fn from(e: AbcspnIoError) -> Self {
        match e {
            AbcspnIoError::Io { .. } => CliError::of(ErrorKind::Io, e),
            AbcspnIoError::Block(b) => b.into(),
            AbcspnIoError::Model(m) => m.into(),
            AbcspnIoError::Manifest { .. } => CliError::of(ErrorKind::Validation, e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::of(ErrorKind::Io, e)
    }
}
