use thiserror::Error;

/// Errors produced by sheaf construction, clamping, inference and learning.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SheafError {
    #[error("vertex `{0}` has zero stalk dimension")]
    ZeroDimension(String),
    #[error("duplicate vertex id `{0}`")]
    DuplicateVertex(String),
    #[error("duplicate edge id `{0}`")]
    DuplicateEdge(String),
    #[error("unknown vertex `{0}`")]
    UnknownVertex(String),
    #[error("unknown edge `{0}`")]
    UnknownEdge(String),
    #[error("edge `{edge}`: weight is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    WeightShape {
        edge: String,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("free vertex `{0}` has a singular Laplacian block (no incident edge?)")]
    SingularBlock(String),
    #[error("relative Laplacian is singular; set a positive Tikhonov shift")]
    SingularLaplacian,
    #[error("source vertex `{vertex}` of edge `{edge}` is clamped; use edge_gradient with the clamped value")]
    ClampedSource { edge: String, vertex: String },
    #[error("covariance is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, SheafError>;
