use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CsmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CsmError {
    #[error("invalid configuration: field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("network spec invalid at layer {layer}: {reason}")]
    Spec { layer: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {stage} (layer {layer})")]
    NonFinite { stage: &'static str, layer: usize },

    #[error("non-finite gradient in {block} (gradient norm {norm})")]
    NonFiniteGradient { block: String, norm: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("query {0} has no clicked images and cannot be trained on")]
    UntrainableQuery(u32),

    #[error("untrainable dataset: {0}")]
    Untrainable(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("unknown {kind}: {ids}")]
    Unknown { kind: &'static str, ids: String },

    #[error("word `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),

    #[error("parse error in {what} at byte {offset}: {reason}")]
    Parse { what: String, offset: u64, reason: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<CsmError>,
    },

    #[error("digest mismatch: index built from checkpoint {index}, but model is {model}")]
    DigestMismatch { index: String, model: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CsmError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CsmError::Config { field: field.into(), reason: reason.into() }
    }

    pub fn parse(what: impl Into<String>, offset: u64, reason: impl Into<String>) -> Self {
        CsmError::Parse { what: what.into(), offset, reason: reason.into() }
    }

    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        CsmError::File { path: path.into(), source: Box::new(self) }
    }

    /// True for problems with input data rather than with how the program was invoked.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, CsmError::Config { .. } | CsmError::Spec { .. })
    }
}
