//! Synthetic detection scenes, image/label I/O and preprocessing.

pub mod image;
pub mod labels;
pub mod scene;

pub use image::{Filter, Image};
pub use labels::{format_labels, parse_labels, read_labels, write_labels};
pub use scene::{
    generate_scene, list_split, load_split, render_scene, write_dataset, Scene, SceneConfig, Split,
};
