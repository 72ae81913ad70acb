//! Orthographic point-splat rendering used for synthetic interaction images
//! and heatmap previews.

use image::{Rgb, RgbImage};
use ndarray::Array2;

/// Maps object coordinates onto image pixels with a fixed oblique
/// orthographic view (y up, z leaning right and up).
#[derive(Clone, Copy, Debug)]
pub struct Projector {
    scale: f64,
    offset_u: f64,
    offset_v: f64,
}

impl Projector {
    const ZU: f64 = 0.35;
    const ZV: f64 = 0.25;

    /// Fits the cloud inside `size × size` pixels leaving `margin` (fraction) on each side.
    pub fn fit(coords: &Array2<f64>, size: u32, margin: f64) -> Self {
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for r in coords.rows() {
            let (u, v) = (r[0] + Self::ZU * r[2], r[1] + Self::ZV * r[2]);
            umin = umin.min(u);
            umax = umax.max(u);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        let extent = (umax - umin).max(vmax - vmin).max(1e-9);
        let usable = size as f64 * (1.0 - 2.0 * margin);
        let scale = usable / extent;
        let centre = size as f64 / 2.0;
        Self {
            scale,
            offset_u: centre - scale * (umin + umax) / 2.0,
            offset_v: centre + scale * (vmin + vmax) / 2.0,
        }
    }

    /// Pixel position (column, row) of a 3-D point.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        let u = p[0] + Self::ZU * p[2];
        let v = p[1] + Self::ZV * p[2];
        (self.offset_u + self.scale * u, self.offset_v - self.scale * v)
    }
}

pub fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

pub fn splat(img: &mut RgbImage, x: f64, y: f64, radius: i64, c: [u8; 3]) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy <= radius * radius {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

/// Thick line by dense splatting.
pub fn line(img: &mut RgbImage, from: (f64, f64), to: (f64, f64), radius: i64, c: [u8; 3]) {
    let len = ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt();
    let steps = (len * 2.0).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        splat(img, from.0 + t * (to.0 - from.0), from.1 + t * (to.1 - from.1), radius, c);
    }
}

pub fn circle(img: &mut RgbImage, centre: (f64, f64), r: f64, thickness: i64, c: [u8; 3]) {
    let steps = (r * 8.0).ceil().max(16.0) as usize;
    for i in 0..steps {
        let a = i as f64 / steps as f64 * std::f64::consts::TAU;
        splat(img, centre.0 + r * a.cos(), centre.1 + r * a.sin(), thickness, c);
    }
}

/// Stick figure whose right hand touches `hand`; `shoulder` sets the pose.
pub fn stick_figure(img: &mut RgbImage, hand: (f64, f64), shoulder: (f64, f64), c: [u8; 3]) {
    let elbow = (
        (hand.0 + shoulder.0) / 2.0 + 6.0,
        (hand.1 + shoulder.1) / 2.0 + 8.0,
    );
    line(img, shoulder, elbow, 2, c);
    line(img, elbow, hand, 2, c);
    circle(img, hand, 4.0, 1, c);
    let hip = (shoulder.0 + 4.0, shoulder.1 + 55.0);
    line(img, shoulder, hip, 2, c);
    circle(img, (shoulder.0, shoulder.1 - 16.0), 11.0, 1, c);
    line(img, hip, (hip.0 - 14.0, hip.1 + 45.0), 2, c);
    line(img, hip, (hip.0 + 14.0, hip.1 + 45.0), 2, c);
    line(img, shoulder, (shoulder.0 + 20.0, shoulder.1 + 35.0), 2, c);
}

/// Renders per-point values in `[0, 1]` as a grey→red heatmap.
pub fn heatmap_image(coords: &Array2<f64>, values: &[f64], size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let proj = Projector::fit(coords, size, 0.08);
    // Draw far points first, then hotter points on top.
    let mut order: Vec<usize> = (0..coords.nrows()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(coords[[b, 2]].partial_cmp(&coords[[a, 2]]).unwrap_or(std::cmp::Ordering::Equal))
    });
    for i in order {
        let v = values[i].clamp(0.0, 1.0);
        let grey = [190.0, 190.0, 190.0];
        let red = [212.0, 61.0, 54.0];
        let c = [
            (grey[0] + v * (red[0] - grey[0])) as u8,
            (grey[1] + v * (red[1] - grey[1])) as u8,
            (grey[2] + v * (red[2] - grey[2])) as u8,
        ];
        let (x, y) = proj.project([coords[[i, 0]], coords[[i, 1]], coords[[i, 2]]]);
        splat(&mut img, x, y, 1, c);
    }
    img
}
