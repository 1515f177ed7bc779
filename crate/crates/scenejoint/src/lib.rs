//! Scene-consistent multi-agent trajectory prediction.
//!
//! The crate covers the full pipeline: synthetic scenario generation,
//! instance-centric scene encoding with relative pose embeddings, a symmetric
//! fusion transformer producing joint multimodal futures, scene-level
//! winner-takes-all training, and joint evaluation metrics with several
//! prediction assembly strategies.

pub mod geom;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scene;
pub mod tensor;
pub mod viz;
