//! Axial-slice montages with annotation and prediction contours.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const DEFAULT_SLICES: usize = 3;
const SCALE: u32 = 4;
const ANNOTATION: Rgb<u8> = Rgb([0, 220, 0]);
const PREDICTION: Rgb<u8> = Rgb([230, 0, 0]);
const BOTH: Rgb<u8> = Rgb([255, 220, 0]);

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub path: PathBuf,
    /// Axial indices shown, left to right.
    pub slices: Vec<usize>,
    pub annotation_contours: Vec<Array2<bool>>,
    pub prediction_contours: Vec<Array2<bool>>,
}

/// Foreground pixels with a 4-neighbour outside the foreground or on the
/// slice border.
pub fn contour(slice: &Array2<u8>) -> Array2<bool> {
    let (h, w) = slice.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if slice[[y, x]] == 0 {
            return false;
        }
        y == 0
            || x == 0
            || y + 1 == h
            || x + 1 == w
            || slice[[y - 1, x]] == 0
            || slice[[y + 1, x]] == 0
            || slice[[y, x - 1]] == 0
            || slice[[y, x + 1]] == 0
    })
}

/// The `n` axial slices with the most annotated voxels (the prediction
/// decides when the annotation is empty), ties broken by lower index,
/// returned in ascending order.
pub fn select_slices(annotation: &Array3<u8>, prediction: &Array3<u8>, n: usize) -> Vec<usize> {
    let count = |m: &Array3<u8>| -> Vec<usize> {
        m.axis_iter(Axis(0)).map(|s| s.iter().filter(|&&v| v > 0).count()).collect()
    };
    let mut fg = count(annotation);
    if fg.iter().all(|&c| c == 0) {
        fg = count(prediction);
    }
    let mut idx: Vec<usize> = (0..fg.len()).collect();
    idx.sort_by(|&a, &b| fg[b].cmp(&fg[a]).then(a.cmp(&b)));
    idx.truncate(n.min(fg.len()));
    idx.sort_unstable();
    idx
}

/// Write a PNG montage of the selected slices to `out`.
pub fn cmd_render(
    volume: &Volume,
    annotation: &Array3<u8>,
    prediction: &Array3<u8>,
    out: &Path,
    n_slices: usize,
) -> Result<RenderOutput> {
    let dims = volume.data.dim();
    if annotation.dim() != dims || prediction.dim() != dims {
        return Err(Error::Shape(format!(
            "render inputs differ: volume {dims:?}, annotation {:?}, prediction {:?}",
            annotation.dim(),
            prediction.dim()
        )));
    }
    let slices = select_slices(annotation, prediction, n_slices.max(1));
    let (_, h, w) = dims;
    let (lo, hi) = volume
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(w as u32 * SCALE * slices.len() as u32, h as u32 * SCALE);
    let mut ann_c = Vec::new();
    let mut pred_c = Vec::new();
    for (k, &z) in slices.iter().enumerate() {
        let a = contour(&annotation.index_axis(Axis(0), z).to_owned());
        let p = contour(&prediction.index_axis(Axis(0), z).to_owned());
        for y in 0..h {
            for x in 0..w {
                let g = ((volume.data[[z, y, x]] - lo) / range * 255.0).round() as u8;
                let px = match (a[[y, x]], p[[y, x]]) {
                    (true, true) => BOTH,
                    (true, false) => ANNOTATION,
                    (false, true) => PREDICTION,
                    _ => Rgb([g, g, g]),
                };
                for dy in 0..SCALE {
                    for dx in 0..SCALE {
                        let ox = (k * w + x) as u32 * SCALE + dx;
                        img.put_pixel(ox, y as u32 * SCALE + dy, px);
                    }
                }
            }
        }
        ann_c.push(a);
        pred_c.push(p);
    }
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(out, image::ImageFormat::Png)
        .map_err(|e| Error::format(out, e.to_string()))?;
    Ok(RenderOutput {
        path: out.to_path_buf(),
        slices,
        annotation_contours: ann_c,
        prediction_contours: pred_c,
    })
}
