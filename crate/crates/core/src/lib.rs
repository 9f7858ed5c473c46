//! Encode variable-size crystal-like designs into clique-structured latents,
//! optimize a learned property surrogate in latent space with rank-based
//! evolution strategies, and decode the optimized latents back into designs.

pub mod atom_decoder;
pub mod batch;
pub mod clique;
pub mod crystal;
pub mod encoder;
pub mod flow;
pub mod nn;
pub mod rng;
pub mod model;
pub mod trainer;
pub mod toy;
pub mod mbo;
pub mod config;
pub mod experiments;
