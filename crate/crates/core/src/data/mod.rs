//! Synthetic scenes, task labels, metrics and portable dumps.

pub mod dump;
pub mod labels;
pub mod metrics;
pub mod scene;

pub use labels::{derive_labels, Labels};
pub use scene::{gen_scene, scene_seed, Scene, SceneConfig, SceneKind, Shape};

/// Keypoints per pose figure.
pub const KEYPOINTS: usize = 4;
/// Circle, square, triangle.
pub const THING_CLASSES: usize = 3;
/// Background plus the thing classes.
pub const SEM_CLASSES: usize = 4;
