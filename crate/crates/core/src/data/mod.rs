//! Synthetic infrared scenes and loading of image/mask directories.

mod io;
mod synth;

pub use io::{
    load_dataset, read_gray, resize_nearest, write_dataset, write_gray16, write_gray8, IMAGES_DIR,
    MASKS_DIR,
};
pub use synth::{synth_dataset, synth_scene, synth_scene_parts, SceneConfig, SceneParts, TargetSpec};

use crate::tensor::Tensor;

/// An image in `[0, 1]` with its binary mask, both `(1, 1, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub id: String,
}
