//! Trainable encoders for images, point clouds and text.

mod image;
mod point;
mod text;

pub use image::ImageEncoder;
pub use point::{
    ball_query, default_levels, farthest_point_sample, interpolation_weights, LevelSpec, PointEncoder,
    PointFeaturePyramid, PointGeometry, DIST_EPS, FP_NEIGHBOURS,
};
pub use text::{sinusoidal_positions, tokenize, TextEncoder};
