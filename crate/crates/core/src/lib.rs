//! Sinkhorn (doubly stochastic) versus Softmax (row-stochastic) self-attention.
//!
//! The crate measures rank collapse of attention products and network outputs
//! across depth, and checks the residual norm bounds for pure self-attention
//! networks normalized with Sinkhorn.
//!
//! Layout:
//! - [`mat`]: dense matrices, norms and the top singular triplet.
//! - [`normalize`]: row/column softmax and log-domain Sinkhorn.
//! - [`project`]: the projector onto zero row/column sum matrices.
//! - [`attention`]: heads, layers and the configurable network forward pass.
//! - [`residual`]: rank-collapse metrics over attention paths and layers.
//! - [`bounds`]: numerical evaluation of the residual decay bounds.
//! - [`autodiff`]: a small reverse-mode tape used by [`train`].
//! - [`pipeline`]: the experiments behind each CSV artifact.
//! - [`randomprod`]: products of random stochastic matrices.
//! - [`verify`]: the invariant suite behind the `verify` subcommand.

pub mod attention;
pub mod autodiff;
pub mod bounds;
mod error;
pub mod mat;
pub mod normalize;
pub mod par;
pub mod pipeline;
pub mod project;
pub mod randomprod;
pub mod residual;
pub mod rng;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use mat::{Mat, SingularTriplet};
pub use normalize::{NormalizerKind, SinkhornParams};
pub use par::Exec;
