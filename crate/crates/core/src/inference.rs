//! Sliding-window full-volume inference.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Feature;

pub const DEFAULT_OVERLAP: f64 = 0.5;

/// Window origins along one axis of length `len` for windows of `size`.
/// The last window is flush with the far end; a single origin 0 is used
/// when the axis is no longer than the window.
pub fn tile_origins(len: usize, size: usize, overlap: f64) -> Vec<usize> {
    if len <= size {
        return vec![0];
    }
    let step = ((size as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let last = len - size;
    let mut out: Vec<usize> = (0..).map(|i| i * step).take_while(|&o| o < last).collect();
    out.push(last);
    out
}

fn crop_padded(v: &Array3<f32>, origin: [usize; 3], size: [usize; 3]) -> Array3<f32> {
    let (dz, dy, dx) = v.dim();
    Array3::from_shape_fn((size[0], size[1], size[2]), |(z, y, x)| {
        v[[
            (origin[0] + z).min(dz - 1),
            (origin[1] + y).min(dy - 1),
            (origin[2] + x).min(dx - 1),
        ]]
    })
}

/// Class probabilities over the whole volume: softmax outputs of every
/// window covering a voxel are averaged with equal weight. Axes shorter than
/// the window are edge-padded and the padding is discarded.
pub fn predict_volume(model: &Model, volume: &Array3<f32>, patch: [usize; 3], overlap: f64) -> Result<Feature> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} outside [0, 1)")));
    }
    model.spec.check_patch(patch)?;
    let (dz, dy, dx) = volume.dim();
    let dims = [dz, dy, dx];
    let k = model.spec.num_classes;
    let n = dz * dy * dx;
    let mut acc = vec![0.0; k * n];
    let mut hits = vec![0u32; n];
    let oz = tile_origins(dz, patch[0], overlap);
    let oy = tile_origins(dy, patch[1], overlap);
    let ox = tile_origins(dx, patch[2], overlap);
    let pn = patch.iter().product::<usize>();
    for &z0 in &oz {
        for &y0 in &oy {
            for &x0 in &ox {
                let window = crop_padded(volume, [z0, y0, x0], patch);
                let probs = model.predict_probs(&Feature::from_volume(&window))?;
                for z in 0..patch[0].min(dz - z0) {
                    for y in 0..patch[1].min(dy - y0) {
                        for x in 0..patch[2].min(dx - x0) {
                            let src = (z * patch[1] + y) * patch[2] + x;
                            let dst = ((z0 + z) * dy + (y0 + y)) * dx + (x0 + x);
                            hits[dst] += 1;
                            for c in 0..k {
                                acc[c * n + dst] += probs.data[c * pn + src];
                            }
                        }
                    }
                }
            }
        }
    }
    for c in 0..k {
        for (a, &h) in acc[c * n..(c + 1) * n].iter_mut().zip(&hits) {
            *a /= f64::from(h);
        }
    }
    Feature::from_vec(k, dims, acc)
}

/// Per-voxel argmax of class probabilities.
pub fn argmax_labels(probs: &Feature) -> Array3<u8> {
    let n = probs.spatial();
    let [z, y, x] = probs.dims;
    let labels: Vec<u8> = (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..probs.channels {
                if probs.data[c * n + v] > probs.data[best * n + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Array3::from_shape_vec((z, y, x), labels).expect("length matches dims")
}
