//! Flow-guided retrieval of prior demonstrations for few-shot imitation.
//!
//! Pipeline: dense optical flow over trajectory frames ([`flowfield`]), a VAE
//! over flow fields ([`flowvae`]), latent-space scoring and thresholded
//! retrieval of prior segments ([`retrieval`]), and an action-chunking policy
//! co-trained with an auxiliary flow head ([`policy`]). [`synthbench`] is a
//! labeled 2D pick-and-place benchmark and [`pipeline`] wires the stages
//! together behind content-hashed caches.

pub mod datastore;
pub mod error;
pub mod flowfield;
pub mod flowvae;
pub mod hashing;
pub mod image;
pub mod pipeline;
pub mod policy;
pub mod retrieval;
mod modelio;
pub mod synthbench;

pub use error::{Error, Result};
