//! Error classification for exit codes and the JSON error line.

use std::fmt;

use llavul::{CheckpointError, ClassifierError, DataError, ModelError, QagenError, TokenizerError, TrainError};
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Internal,
    Usage,
    MissingInput,
    Schema,
    StageOrder,
    Config,
    Transport,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Internal => 1,
            Kind::Usage => 2,
            Kind::MissingInput => 3,
            Kind::Schema => 4,
            Kind::StageOrder => 5,
            Kind::Config => 6,
            Kind::Transport => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Internal => "internal",
            Kind::Usage => "usage",
            Kind::MissingInput => "missing_input",
            Kind::Schema => "schema",
            Kind::StageOrder => "stage_order",
            Kind::Config => "config",
            Kind::Transport => "transport",
        }
    }
}

/// An error the CLI itself raises with a known kind.
#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        CliError { kind, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn io_kind(e: &std::io::Error) -> Kind {
    if e.kind() == std::io::ErrorKind::NotFound {
        Kind::MissingInput
    } else {
        Kind::Internal
    }
}

fn checkpoint_kind(e: &CheckpointError) -> Kind {
    match e {
        CheckpointError::Io { source, .. } => io_kind(source),
        _ => Kind::Schema,
    }
}

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::Checkpoint(c) => checkpoint_kind(c),
        ModelError::Tokenizer(TokenizerError::Io(io)) => io_kind(io),
        ModelError::Tokenizer(TokenizerError::Format(_)) => Kind::Schema,
        ModelError::Config(_) => Kind::Config,
        ModelError::Input(_) | ModelError::ContextOverflow { .. } => Kind::Schema,
        _ => Kind::Internal,
    }
}

fn data_kind(e: &DataError) -> Kind {
    match e {
        DataError::Io(io) => io_kind(io),
        DataError::Config(_) => Kind::Config,
        _ => Kind::Schema,
    }
}

/// Walks the error chain for the first recognised cause.
pub fn classify(err: &anyhow::Error) -> Kind {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.kind;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::StageOrder(_) => Kind::StageOrder,
                TrainError::Config(_) => Kind::Config,
                TrainError::EmptyCorpus => Kind::Schema,
                TrainError::Model(m) => model_kind(m),
                TrainError::Io(io) => io_kind(io),
                _ => Kind::Internal,
            };
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<CheckpointError>() {
            return checkpoint_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<DataError>() {
            return data_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<QagenError>() {
            return match e {
                QagenError::Transport(_) => Kind::Transport,
                QagenError::Data(d) => data_kind(d),
                _ => Kind::Schema,
            };
        }
        if let Some(e) = cause.downcast_ref::<ClassifierError>() {
            return match e {
                ClassifierError::Model(m) => model_kind(m),
                ClassifierError::Corpus(_) => Kind::Schema,
                ClassifierError::Numerics(_) => Kind::Internal,
            };
        }
        if let Some(e) = cause.downcast_ref::<TokenizerError>() {
            return match e {
                TokenizerError::Io(io) => io_kind(io),
                TokenizerError::Training(_) => Kind::Config,
                _ => Kind::Schema,
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return io_kind(e);
        }
    }
    Kind::Internal
}

pub fn error_json(kind: Kind, message: &str) -> String {
    json!({"error": {"kind": kind.name(), "code": kind.code(), "message": message}}).to_string()
}
