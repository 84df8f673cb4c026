//! Cognition-graph guided generation of deformable 4D Gaussian scenes.
//!
//! The pipeline runs image (or text) prompts through five token encoders,
//! builds semantic / global / local cognition graphs, fuses them, rolls the
//! fused graph forward with an action-conditioned latent world model, and
//! conditions a flow-matching diffusion transformer whose latents decode
//! into polynomial-deformation Gaussian scenes.

mod error;
pub mod nn;

pub use error::{Error, Result};
pub(crate) use error::ensure_config;
pub mod gaussians4d;
pub mod scene_synth;
pub mod foundation;
pub mod cognition_graph;
pub mod world_model;
pub mod latent_codec;
pub mod cgdit;
pub mod config;
pub mod training;
pub mod model;
