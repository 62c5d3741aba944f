//! Layout-guided decoupled cross-attention in a toy latent-diffusion sampler.
//!
//! Text conditioning and per-subject image conditioning run as separate
//! attention streams. Each subject's stream only sees the query rows inside its
//! box, and the result is merged back in place according to a priority winner
//! map.

pub mod adapter;
pub mod attention;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod layout;
pub mod metrics;
pub mod numerics;
pub mod par;
pub mod tensorio;

pub use error::{Error, Result};
