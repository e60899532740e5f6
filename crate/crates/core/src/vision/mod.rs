//! Images, augmentation kernels and the synthetic ShapeWorld dataset.

mod augment;
mod image;
mod shapeworld;

pub use augment::{
    augment, augment_traced, color_jitter, crop_resize, gaussian_blur, horizontal_flip,
    jitter_with, make_views, resized_crop, to_grayscale, AugKind, AugName, AugmentationSpec,
    CompositionSpec, JitterDeltas, JitterFactors,
};
pub use image::Image;
pub use shapeworld::{gen_shapeworld, Dataset, Sample, ShapeWorldSpec, COLORS, SHAPES};
