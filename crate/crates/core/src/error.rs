use thiserror::Error;

/// Errors raised anywhere in the quantization engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("layer `{layer}`: {message}")]
    Layer { layer: String, message: String },

    #[error("tensor {0} is not recorded on the tape")]
    NotOnTape(usize),

    #[error("target has {size} elements, oracle limit is {limit}")]
    TargetTooLarge { size: usize, limit: usize },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invalid quantization parameters: {0}")]
    Quant(String),

    #[error("loss `{0}` has no bounded Hessian")]
    Unbounded(&'static str),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset has no labels, required for {0}")]
    MissingLabels(&'static str),

    #[error("optimization diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn layer(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Layer {
            layer: layer.into(),
            message: message.into(),
        }
    }

    /// Wraps the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Name of the outermost pipeline stage, if the error carries one.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
