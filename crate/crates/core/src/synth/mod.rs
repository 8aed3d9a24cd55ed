//! Synthetic rail scenes, dataset files and image transforms.

pub mod dataset;
pub mod scene;
pub mod transform;

pub use dataset::{read_dataset, write_dataset, DatasetRecord, MISSING};
pub use scene::{generate_scene, Scene, SceneConfig};
pub use transform::{augment, Affine, AugmentConfig, FrameMap, Preprocess};
