use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("shape/offset mismatch for tensor `{name}`: {detail}")]
    ShapeOffsetMismatch { name: String, detail: String },

    #[error("unknown layer kind `{kind}` on layer `{id}`")]
    UnknownLayerKind { id: String, kind: String },

    #[error("dangling layer id `{id}` referenced from `{from}`")]
    DanglingLayer { id: String, from: String },

    #[error("invalid layer `{id}`: {detail}")]
    InvalidLayer { id: String, detail: String },

    #[error("invalid block `{id}`: {detail}")]
    InvalidBlock { id: String, detail: String },

    #[error("invalid tensor `{name}`: {detail}")]
    InvalidTensor { name: String, detail: String },

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("channel config references unknown layer `{0}`")]
    UnknownConfigLayer(String),

    #[error("channel config gives layer `{0}` zero channels")]
    ZeroChannels(String),

    #[error("channel config for layer `{id}` is invalid: {detail}")]
    InvalidConfig { id: String, detail: String },

    #[error("block `{0}` has no prunable batch-norm")]
    BlockMissingBn(String),

    #[error("every prunable block has all-zero gamma; importance is undefined")]
    AllZeroGamma,

    #[error("invalid budget: {0}")]
    InvalidBudget(String),

    #[error("interval cannot bracket target {target} FLOPs: {detail}")]
    CannotBracket { target: u64, detail: String },

    #[error("inconsistent channel selection at `{id}`: {detail}")]
    InconsistentSelection { id: String, detail: String },

    #[error("shape mismatch at layer `{id}`: {detail}")]
    ShapeMismatch { id: String, detail: String },

    #[error("non-finite activation at layer `{0}`")]
    NonFinite(String),

    #[error("backward requires a cache from a train-mode forward")]
    StaleCache,

    #[error("empty data slice `{0}`")]
    EmptyData(String),

    #[error("truncated record in {0}")]
    TruncatedRecord(PathBuf),

    #[error("invalid label {label} at record {index}")]
    InvalidLabel { index: usize, label: usize },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid config: {0}")]
    InvalidConfigFile(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stage name when this error was raised inside a pipeline stage.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
