//! Raster primitives shared by every stage.

pub mod augment;
pub mod denoise;
pub mod geometry;
pub mod kmeans;
pub mod moments;
pub mod morphology;
pub mod raster;
pub mod threshold;

pub use augment::{
    apply_augmentation, apply_geometric_mask, apply_record, invert_geometric, AugmentPolicy,
    AugmentationRecord, Photometric,
};
pub use denoise::{nlm_denoise, NlmParams};
pub use geometry::{
    resize, resize_mask, rot90, rot90_mask, rot90_plane, rotate, rotate_mask, vflip, vflip_mask,
    vflip_plane, Affine, Interp, Resampler, IMAGE_FILL,
};
pub use kmeans::{kmeans_intensity, KMeansResult};
pub use moments::{fit_ellipse, wrap_angle, wrap_axis_angle, EllipseParams};
pub use morphology::{
    chessboard_distance, connected_components, dilate, erode, erosion_depth, largest_component,
};
pub use raster::{BinaryMask, ImageCrop};
pub use threshold::{otsu_threshold, OtsuResult};
