use thiserror::Error;

/// Errors produced anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cycle detected in CWE hierarchy through edges: {}", format_edges(.0))]
    Cycle(Vec<(String, String)>),

    #[error("edge references unknown CWE id `{0}`")]
    DanglingEdge(String),

    #[error("unknown CWE id `{0}`")]
    UnknownCwe(String),

    #[error("duplicate CWE id `{0}`")]
    DuplicateCwe(String),

    #[error("CWE `{0}` has an empty description")]
    EmptyDescription(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed JSON at byte offset {offset}: {message}")]
    Json { offset: usize, message: String },

    #[error("malformed feed item `{item}`: {reason}")]
    MalformedItem { item: String, reason: String },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in encoder layer {layer}")]
    NonFinite { layer: usize },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

fn format_edges(edges: &[(String, String)]) -> String {
    edges
        .iter()
        .map(|(c, p)| format!("{c}->{p}"))
        .collect::<Vec<_>>()
        .join(", ")
}
