use std::fmt::Write as _;
use std::path::Path;

use image::imageops::FilterType;
use ndarray::{Array2, Array3};

use super::{InteractionImage, POINTS_PER_INSTANCE};
use crate::error::{Error, Result};

/// Side length images are resampled to at load time.
pub const DEFAULT_IMAGE_SIZE: u32 = 224;

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses whitespace-separated numeric rows, skipping blank lines.
/// Returns `(line_number, values)` per row.
fn parse_rows(path: &Path, text: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rows = Vec::with_capacity(POINTS_PER_INSTANCE);
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("non-numeric token `{tok}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((line_no, values));
    }
    Ok(rows)
}

/// Reads a `2048 × 4` "x y z h" annotation file into coordinates and heatmap.
pub fn load_point_annotation(path: &Path) -> Result<(Array2<f64>, Vec<f64>)> {
    let text = read_text(path)?;
    let rows = parse_rows(path, &text)?;
    if rows.len() != POINTS_PER_INSTANCE {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected {POINTS_PER_INSTANCE} rows, found {}", rows.len()),
        });
    }
    let mut coords = Array2::zeros((POINTS_PER_INSTANCE, 3));
    let mut heat = Vec::with_capacity(POINTS_PER_INSTANCE);
    for (r, (line, values)) in rows.iter().enumerate() {
        if values.len() != 4 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {line}: expected 4 columns, found {}", values.len()),
            });
        }
        if values[..3].iter().any(|v| !v.is_finite()) {
            return Err(Error::Range {
                path: path.to_path_buf(),
                line: *line,
                msg: "non-finite coordinate".into(),
            });
        }
        let h = values[3];
        if !(h.is_finite() && (0.0..=1.0).contains(&h)) {
            return Err(Error::Range {
                path: path.to_path_buf(),
                line: *line,
                msg: format!("heatmap value {h} outside [0, 1]"),
            });
        }
        for c in 0..3 {
            coords[[r, c]] = values[c];
        }
        heat.push(h);
    }
    Ok((coords, heat))
}

/// Reads point coordinates from a 3-column ("x y z") or 4-column annotation file.
pub fn load_point_coords(path: &Path) -> Result<Array2<f64>> {
    let text = read_text(path)?;
    let rows = parse_rows(path, &text)?;
    if rows.len() != POINTS_PER_INSTANCE {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected {POINTS_PER_INSTANCE} rows, found {}", rows.len()),
        });
    }
    let mut coords = Array2::zeros((POINTS_PER_INSTANCE, 3));
    for (r, (line, values)) in rows.iter().enumerate() {
        if values.len() != 3 && values.len() != 4 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {line}: expected 3 or 4 columns, found {}", values.len()),
            });
        }
        if values[..3].iter().any(|v| !v.is_finite()) {
            return Err(Error::Range {
                path: path.to_path_buf(),
                line: *line,
                msg: "non-finite coordinate".into(),
            });
        }
        for c in 0..3 {
            coords[[r, c]] = values[c];
        }
    }
    Ok(coords)
}

/// Writes "x y z h" rows. Values use Rust's shortest round-trip formatting,
/// so reading the file back yields bit-identical numbers.
pub fn write_point_annotation(path: &Path, coords: &Array2<f64>, heat: &[f64]) -> Result<()> {
    if coords.ncols() != 3 || coords.nrows() != heat.len() {
        return Err(Error::Shape(format!(
            "annotation write: coords {:?} vs heatmap length {}",
            coords.dim(),
            heat.len()
        )));
    }
    let mut out = String::with_capacity(coords.nrows() * 48);
    for (row, h) in coords.rows().into_iter().zip(heat) {
        let _ = writeln!(out, "{} {} {} {}", row[0], row[1], row[2], h);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads an 8-bit RGB raster and bilinearly resamples it to `size × size`.
pub fn load_image(
    path: &Path,
    object_category: &str,
    affordance_category: &str,
    size: u32,
) -> Result<InteractionImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let (w, h) = (img.width(), img.height());
    if w < 32 || h < 32 {
        return Err(Error::Validation(format!(
            "{}: image is {w}x{h}; minimum is 32x32",
            path.display()
        )));
    }
    let mut rgb = img.to_rgb8();
    if w != size || h != size {
        rgb = image::imageops::resize(&rgb, size, size, FilterType::Triangle);
    }
    let s = size as usize;
    let mut pixels = Array3::zeros((3, s, s));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            pixels[[c, y as usize, x as usize]] = p[c] as f64 / 255.0;
        }
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    InteractionImage::new(id, object_category, affordance_category, pixels)
}
