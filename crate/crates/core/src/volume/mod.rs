//! Volumetric cases: intensity grids, label masks, their containers,
//! preprocessing, patch sampling, fold splitting and synthetic phantoms.

use ndarray::Array3;

use crate::error::{Error, Result};

pub mod io;
pub mod nifti;
pub mod patch;
pub mod preprocess;
pub mod split;
pub mod synthetic;

pub use io::{load_case, save_case};
pub use patch::{sample_patch, CaseSampler, Patch};
pub use preprocess::{preprocess, IntensityStats};
pub use split::{make_split, SplitPlan};
pub use synthetic::{gen_synthetic_case, LesionFamily, ShapeKind, SyntheticCase};

/// Intensity grid in `(z, y, x)` order with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: [f64; 3],
    pub case_id: String,
    pub source_task: String,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], case_id: impl Into<String>, source_task: impl Into<String>) -> Result<Self> {
        check_spacing(spacing)?;
        Ok(Volume {
            data,
            spacing,
            case_id: case_id.into(),
            source_task: source_task.into(),
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (z, y, x) = self.data.dim();
        [z, y, x]
    }
}

pub(crate) fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::Spacing(spacing))
    }
}

/// Integer label grid aligned with a [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub labels: Array3<u8>,
    pub num_classes: usize,
}

impl Mask {
    pub fn new(labels: Array3<u8>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("a mask needs at least two classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&v| usize::from(v) >= num_classes) {
            return Err(Error::LabelRange {
                label: bad,
                num_classes,
            });
        }
        Ok(Mask { labels, num_classes })
    }

    /// Binary mask from any labelling: every positive label becomes 1.
    pub fn binary(labels: Array3<u8>) -> Self {
        Mask {
            labels: merge_labels(&labels),
            num_classes: 2,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let (z, y, x) = self.labels.dim();
        [z, y, x]
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v > 0).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.labels.len() as f64
    }

    pub fn check_aligned(&self, volume: &Volume) -> Result<()> {
        if self.shape() != volume.shape() {
            return Err(Error::Shape(format!(
                "mask shape {:?} differs from volume shape {:?}",
                self.shape(),
                volume.shape()
            )));
        }
        Ok(())
    }
}

/// Label policy for pooled lesion tasks: any positive label maps to 1.
pub fn merge_labels(labels: &Array3<u8>) -> Array3<u8> {
    labels.mapv(|v| u8::from(v > 0))
}
