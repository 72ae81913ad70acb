//! Point-image affordance data: file formats, manifest, partitions and
//! paired sampling.

mod io;
mod manifest;
mod partition;
mod sampling;
pub mod synth;

pub use io::{
    load_image, load_point_annotation, load_point_coords, write_point_annotation, DEFAULT_IMAGE_SIZE,
};
pub use manifest::{load_manifest, ImageEntry, Manifest, PointEntry};
pub use partition::{make_partition, make_partitions, EntryId, PartitionName, PartitionSpec, Partitions};
pub use sampling::{draw_pairs, sample_batch, PairIndex, SampleLoader};

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

/// Number of points per object instance.
pub const POINTS_PER_INSTANCE: usize = 2048;

/// A 2048-point object in object-local coordinates (`[N × 3]`).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudInstance {
    pub id: String,
    pub object_category: String,
    pub coords: Array2<f64>,
}

impl PointCloudInstance {
    pub fn new(id: impl Into<String>, object_category: impl Into<String>, coords: Array2<f64>) -> Result<Self> {
        let id = id.into();
        if coords.dim() != (POINTS_PER_INSTANCE, 3) {
            return Err(Error::Validation(format!(
                "point cloud `{id}` has shape {:?}, expected ({POINTS_PER_INSTANCE}, 3)",
                coords.dim()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("point cloud `{id}` has non-finite coordinates")));
        }
        let first = coords.row(0);
        if coords.rows().into_iter().all(|r| r == first) {
            return Err(Error::Validation(format!(
                "point cloud `{id}` is degenerate: all points coincide"
            )));
        }
        Ok(Self {
            id,
            object_category: object_category.into(),
            coords,
        })
    }

    /// Copy centred at the origin and scaled to unit maximum radius.
    pub fn normalized(&self) -> Self {
        Self {
            id: self.id.clone(),
            object_category: self.object_category.clone(),
            coords: normalize_coords(&self.coords),
        }
    }
}

/// Centres a cloud on its mean and scales it so the farthest point lies on the unit sphere.
pub fn normalize_coords(coords: &Array2<f64>) -> Array2<f64> {
    let mean = coords.mean_axis(Axis(0)).expect("non-empty cloud");
    let centred = coords - &mean;
    let radius = centred
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max);
    if radius > 0.0 {
        centred / radius
    } else {
        centred
    }
}

/// Per-point affordance heatmap of one instance for one affordance.
#[derive(Clone, Debug, PartialEq)]
pub struct AffordanceAnnotation {
    pub instance_id: String,
    pub affordance_category: String,
    pub heatmap: Vec<f64>,
}

impl AffordanceAnnotation {
    pub fn new(
        instance_id: impl Into<String>,
        affordance_category: impl Into<String>,
        heatmap: Vec<f64>,
        point_count: usize,
    ) -> Result<Self> {
        let instance_id = instance_id.into();
        if heatmap.len() != point_count {
            return Err(Error::Validation(format!(
                "annotation for `{instance_id}` has {} values for {point_count} points",
                heatmap.len()
            )));
        }
        if let Some(bad) = heatmap.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Validation(format!(
                "annotation for `{instance_id}` has value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            instance_id,
            affordance_category: affordance_category.into(),
            heatmap,
        })
    }
}

/// RGB interaction image, channel-first with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionImage {
    pub id: String,
    pub object_category: String,
    pub affordance_category: String,
    pub pixels: Array3<f64>,
}

impl InteractionImage {
    pub fn new(
        id: impl Into<String>,
        object_category: impl Into<String>,
        affordance_category: impl Into<String>,
        pixels: Array3<f64>,
    ) -> Result<Self> {
        let id = id.into();
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::Validation(format!("image `{id}` has {c} channels, expected 3")));
        }
        if h < 32 || w < 32 {
            return Err(Error::Validation(format!("image `{id}` is {h}x{w}; minimum is 32x32")));
        }
        if pixels.iter().any(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
            return Err(Error::Validation(format!("image `{id}` has pixel values outside [0, 1]")));
        }
        Ok(Self {
            id,
            object_category: object_category.into(),
            affordance_category: affordance_category.into(),
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

/// An image and an independently drawn point instance of the same
/// (object, affordance) cell, with the instance's annotation.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub points: PointCloudInstance,
    pub label: AffordanceAnnotation,
    pub image: InteractionImage,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn ring() -> Array2<f64> {
        Array2::from_shape_fn((POINTS_PER_INSTANCE, 3), |(i, j)| {
            let t = i as f64 * 0.01;
            [t.cos() * 3.0 + 5.0, t.sin() * 3.0 - 2.0, (i % 7) as f64][j]
        })
    }

    #[test]
    fn normalization_centres_and_scales() {
        let n = normalize_coords(&ring());
        let mean = n.mean_axis(Axis(0)).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
        let max_r = n.rows().into_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max);
        assert!((max_r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cloud_rejected() {
        let coords = Array2::from_elem((POINTS_PER_INSTANCE, 3), 0.5);
        assert!(matches!(
            PointCloudInstance::new("a", "mug", coords),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn wrong_point_count_rejected() {
        let coords = Array2::zeros((100, 3));
        assert!(PointCloudInstance::new("a", "mug", coords).is_err());
    }

    #[test]
    fn annotation_range_checked() {
        let mut h = vec![0.0; 4];
        h[2] = 1.5;
        assert!(AffordanceAnnotation::new("a", "grasp", h, 4).is_err());
        assert!(AffordanceAnnotation::new("a", "grasp", vec![0.0; 3], 4).is_err());
        assert!(AffordanceAnnotation::new("a", "grasp", vec![0.2; 4], 4).is_ok());
    }

    #[test]
    fn image_invariants() {
        assert!(InteractionImage::new("i", "mug", "grasp", Array3::zeros((3, 32, 32))).is_ok());
        assert!(InteractionImage::new("i", "mug", "grasp", Array3::zeros((1, 32, 32))).is_err());
        assert!(InteractionImage::new("i", "mug", "grasp", Array3::zeros((3, 16, 32))).is_err());
        assert!(InteractionImage::new("i", "mug", "grasp", Array3::from_elem((3, 32, 32), 2.0)).is_err());
    }
}
