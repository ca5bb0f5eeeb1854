use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("axis {axis} is invalid for a tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("index {index:?} is out of bounds for shape {shape:?}")]
    OutOfBounds { index: Vec<usize>, shape: Vec<usize> },

    #[error("invalid convolution: {0}")]
    InvalidConv(String),

    /// The per-channel input sums add up to something that is not strictly
    /// positive, so the bias of a balanced layer is undefined.
    #[error("sum of layer inputs is {sum:e}; balanced normalization needs a positive input sum")]
    ZeroInputSum { sum: f64 },

    /// The positive part of an output channel's shifted kernel vanishes
    /// (all weights share one sign, or the kernel collapsed to zero).
    #[error("degenerate weights in output channel {channel}: scale denominator is {denominator:e}")]
    DegenerateWeights { channel: usize, denominator: f64 },

    #[error("running statistics requested before any training step")]
    UninitializedStats,

    #[error("cannot give a kernel slice mixed signs with fewer than two nonzero elements")]
    ImpossibleBalance,

    #[error("batch norm needs at least two values per channel in train mode, got {0}")]
    InsufficientBatch(usize),

    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("epoch {epoch} is outside the schedule range 1..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("runs {runs:?} do not share the epoch grid of run 0")]
    MisalignedEpochs { runs: Vec<usize> },

    #[error("{path}: truncated record at byte offset {offset}")]
    Truncated { path: PathBuf, offset: u64 },

    #[error("{path}: label {label} at record {record} is out of range for {classes} classes")]
    LabelOutOfRange {
        path: PathBuf,
        record: usize,
        label: usize,
        classes: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn in_layer(self, layer: impl Into<String>) -> Self {
        Error::Layer {
            layer: layer.into(),
            source: Box::new(self),
        }
    }

    /// Strips any layer wrappers.
    pub fn root_cause(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root_cause(),
            other => other,
        }
    }

    /// True for failures of the numerics (as opposed to configuration or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root_cause(),
            Error::ZeroInputSum { .. }
                | Error::DegenerateWeights { .. }
                | Error::NonFinite(_)
                | Error::InsufficientBatch(_)
                | Error::UninitializedStats
        )
    }
}
