use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("operation `{op}` produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("eigensolver did not converge: residual {residual:e} after {iterations} iterations")]
    EigenNotConverged { residual: f64, iterations: usize },

    #[error("pagerank did not converge: residual {residual:e} after {iterations} iterations")]
    PageRankNotConverged { residual: f64, iterations: usize },

    #[error("{graph} graph has {available} non-trivial eigenpairs, {requested} requested ({deficit} short)", deficit = requested - available)]
    SpectrumDeficit {
        graph: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("{side}-side projection graph has no edges")]
    EmptyProjection { side: &'static str },

    #[error("random feature overflow (exponent {exponent:.1}); scale the attention input down")]
    FeatureOverflow { exponent: f64 },

    #[error("attention denominator {value:e} underflowed")]
    AttentionUnderflow { value: f64 },

    #[error("node {node} has a zero-norm representation")]
    ZeroNorm { node: usize },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
