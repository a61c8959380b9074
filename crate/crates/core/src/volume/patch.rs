//! Foreground-biased random patch cropping and task-balanced case drawing.

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{Mask, Volume};

pub const DEFAULT_FG_BIAS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub volume_crop: Array3<f32>,
    pub mask_crop: Array3<u8>,
    /// Corner of the crop in (edge-padded) source coordinates.
    pub origin: [usize; 3],
}

/// A case prepared for repeated sampling: the foreground voxel list is built
/// once.
#[derive(Debug, Clone)]
pub struct PatchSource<'a> {
    volume: &'a Array3<f32>,
    mask: &'a Array3<u8>,
    foreground: Vec<[usize; 3]>,
}

impl<'a> PatchSource<'a> {
    pub fn new(volume: &'a Volume, mask: &'a Mask) -> Self {
        let foreground = mask
            .labels
            .indexed_iter()
            .filter(|(_, &l)| l > 0)
            .map(|((z, y, x), _)| [z, y, x])
            .collect();
        PatchSource {
            volume: &volume.data,
            mask: &mask.labels,
            foreground,
        }
    }

    pub fn has_foreground(&self) -> bool {
        !self.foreground.is_empty()
    }

    /// Crop of `size`. With probability `fg_bias` (and when foreground exists)
    /// the crop is centred on a random foreground voxel, shifted inward only as
    /// far as needed to stay inside the volume; otherwise the origin is
    /// uniform. Axes shorter than `size` are padded at the far end by edge
    /// replication.
    pub fn sample<R: Rng + ?Sized>(&self, size: [usize; 3], rng: &mut R, fg_bias: f64) -> Patch {
        assert!(size.iter().all(|&s| s >= 1), "patch size components must be >= 1");
        let (dz, dy, dx) = self.volume.dim();
        let dims = [dz, dy, dx];
        let padded: [usize; 3] = std::array::from_fn(|i| dims[i].max(size[i]));
        let max_origin: [usize; 3] = std::array::from_fn(|i| padded[i] - size[i]);
        let biased = self.has_foreground() && rng.random_bool(fg_bias.clamp(0.0, 1.0));
        let origin: [usize; 3] = if biased {
            let c = self.foreground[rng.random_range(0..self.foreground.len())];
            std::array::from_fn(|i| c[i].saturating_sub(size[i] / 2).min(max_origin[i]))
        } else {
            std::array::from_fn(|i| rng.random_range(0..=max_origin[i]))
        };
        Patch {
            volume_crop: crop(self.volume, origin, size),
            mask_crop: crop(self.mask, origin, size),
            origin,
        }
    }
}

fn crop<T: Copy>(a: &Array3<T>, origin: [usize; 3], size: [usize; 3]) -> Array3<T> {
    let (dz, dy, dx) = a.dim();
    let fits = origin[0] + size[0] <= dz && origin[1] + size[1] <= dy && origin[2] + size[2] <= dx;
    if fits {
        return a
            .slice(s![
                origin[0]..origin[0] + size[0],
                origin[1]..origin[1] + size[1],
                origin[2]..origin[2] + size[2]
            ])
            .to_owned();
    }
    Array3::from_shape_fn((size[0], size[1], size[2]), |(z, y, x)| {
        a[[
            (origin[0] + z).min(dz - 1),
            (origin[1] + y).min(dy - 1),
            (origin[2] + x).min(dx - 1),
        ]]
    })
}

pub fn sample_patch<R: Rng + ?Sized>(v: &Volume, m: &Mask, size: [usize; 3], rng: &mut R, fg_bias: f64) -> Patch {
    PatchSource::new(v, m).sample(size, rng, fg_bias)
}

/// Draws `(task, case)` pairs: tasks are visited in freshly shuffled rounds
/// (so every draw is uniform over tasks and task counts never drift apart by
/// more than one), then a case is chosen uniformly within the task.
#[derive(Debug, Clone)]
pub struct CaseSampler {
    tasks: Vec<Vec<usize>>,
    round: Vec<usize>,
}

impl CaseSampler {
    /// `tasks[t]` lists the indices of the cases belonging to task `t`. Empty
    /// tasks are dropped.
    pub fn new(tasks: Vec<Vec<usize>>) -> Self {
        CaseSampler {
            tasks: tasks.into_iter().filter(|t| !t.is_empty()).collect(),
            round: Vec::new(),
        }
    }

    /// Single-task sampler over `0..n`.
    pub fn single(n: usize) -> Self {
        CaseSampler::new(vec![(0..n).collect()])
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (usize, usize) {
        assert!(!self.tasks.is_empty(), "sampler has no cases");
        if self.round.is_empty() {
            self.round = (0..self.tasks.len()).collect();
            self.round.shuffle(rng);
        }
        let t = self.round.pop().expect("refilled above");
        let cases = &self.tasks[t];
        (t, cases[rng.random_range(0..cases.len())])
    }
}
