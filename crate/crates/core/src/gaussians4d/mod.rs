//! Deformable Gaussian scenes, pinhole cameras, the differentiable
//! renderer, and geometric / temporal metrics.

pub mod export;
pub mod metrics;
pub mod render;
pub mod scene;

pub use metrics::{chamfer, f_score, temporal_smoothness};
pub use render::render;
pub use scene::{Camera, Gaussian4DScene};
