//! Inference and learning for nonlinear Gaussian state-space models with
//! sequential Monte Carlo, including a Hamiltonian variant where
//! transition-sampled particles are transported along Riemannian-manifold
//! Hamiltonian flows and weighted through the flow's volume preservation.

pub mod dist;
pub mod gpssm;
pub mod hamilton;
pub mod harness;
pub mod hsmc;
pub mod metric;
pub mod numcore;
pub mod smc;
pub mod ssm;
