//! Linear predictive-coding networks modeled as cellular sheaves.
//!
//! The crate covers the sheaf data model ([`sheaf`]), clamped relative systems
//! and their Hodge operators ([`relative`]), iterative inference ([`dynamics`]),
//! per-edge learning rules ([`learning`]) and the network factories, metrics
//! and sweeps used in the knotted and all-to-all experiments ([`experiments`]).

pub mod data;
pub mod dynamics;
pub mod experiments;
pub mod error;
pub mod io;
pub mod learning;
pub mod linalg;
pub mod random;
pub mod relative;
pub mod sheaf;

pub use error::{Result, SheafError};
pub use relative::{ClampSpec, HodgeSolution, RelativeSystem};
pub use sheaf::{Cochain0, Cochain1, CoboundaryMatrix, Edge, EdgeId, PCSheaf, Vertex, VertexId};
