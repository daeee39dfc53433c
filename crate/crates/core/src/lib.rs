//! Part-compositional embedding prior.
//!
//! The crate covers the whole desk-scale pipeline: a part taxonomy and the
//! hybrid prompt corpus built from it ([`taxonomy`]), a synthetic embedding
//! world with an analytic composition oracle ([`world`]), a small dense
//! network with manual gradients ([`nn`]), the diffusion and rectified-flow
//! prior built on it ([`prior`]), the evaluation stack ([`eval`]) and the
//! end-to-end pipeline with its run manifest ([`pipeline`]).
//!
//! Data-parallel loops go through [`exec::Exec`], which uses rayon when the
//! `parallel` feature is enabled and runs sequentially otherwise.

pub mod cli;
pub mod config;
pub mod eval;
pub mod exec;
pub mod nn;
pub mod pipeline;
pub mod prior;
pub mod seed;
pub mod taxonomy;
pub mod world;

pub use exec::Exec;
