//! Numeric substrate: reverse-mode differentiation, dense linear algebra,
//! keyed random streams and finite-difference checks.

pub mod ad;
pub mod fd;
pub mod linalg;
pub mod mlp;
pub mod params;
pub mod rng;

pub use ad::{Real, ScalarFn, Tape, Var};
pub use linalg::{cholesky, LinalgError, Mat};
pub use mlp::{Activation, Mlp};
pub use params::ParamMap;
pub use rng::{derive_seed, Purpose, RngStream};
