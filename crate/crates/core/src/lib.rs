//! Edge-classification GNNs for directed transaction multigraphs, with
//! confidence-guided one-side edge sampling (OES), a spectral smoothing
//! diagnostics suite, and a synthetic anti-money-laundering data pipeline.

pub mod error;
pub mod graph;
pub mod matrix;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{DirectedMultigraph, Direction, EdgeId, EdgeLabel, EgoNetwork, NodeId, Reachability};
pub use matrix::Matrix;
pub use tensor::{GradStore, Tensor};
