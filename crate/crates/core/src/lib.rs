//! MiLoDo: a learned decentralized optimizer for composite problems
//! `min Σ_i f_i(x) + λ‖x‖₁`, together with the handcrafted proximal
//! baselines it is compared against.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod graph;
mod io;
pub mod linalg;
pub mod metrics;
pub mod milodo;
pub mod neuro;
pub mod problems;
pub mod scalar;
pub mod seeds;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};

pub type Optimizee64 = problems::Optimizee<f64>;
pub type Optimizee32 = problems::Optimizee<f32>;
pub type Params64 = neuro::MiLoDoParams<f64>;
pub type Params32 = neuro::MiLoDoParams<f32>;
pub type Gossip64 = graph::GossipMatrix<f64>;
pub type Gossip32 = graph::GossipMatrix<f32>;
