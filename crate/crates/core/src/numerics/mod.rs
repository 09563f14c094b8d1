//! Dense and sparse kernels, the gradient tape, Adam, the symmetric
//! eigensolver and PageRank.

pub mod adam;
pub mod autograd;
pub mod dense;
pub mod eigen;
pub mod pagerank;
pub mod sparse;

pub use adam::{AdamConfig, AdamState};
pub use autograd::{
    Gradients, ParamId, ParamStore, Parameter, SparseOperator, Tape, TapeFunction, Var,
};
pub use dense::DenseMatrix;
pub use eigen::{symmetric_eigs_smallest, EigenOptions, EigenPairs, EigenStrategy};
pub use pagerank::{pagerank, PageRankOptions};
pub use sparse::CsrMatrix;
