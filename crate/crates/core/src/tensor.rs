//! Dense channel-major feature maps for a single sample.

use ndarray::Array3;

use crate::error::{Error, Result};

/// A `C × Z × Y × X` feature map stored contiguously, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Feature {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Feature {
            channels,
            dims,
            data: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let expected = channels * dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "feature buffer has {} values, expected {expected}",
                data.len()
            )));
        }
        Ok(Feature {
            channels,
            dims,
            data,
        })
    }

    /// Single-channel feature from an intensity grid.
    pub fn from_volume(grid: &Array3<f32>) -> Self {
        let (z, y, x) = grid.dim();
        Feature {
            channels: 1,
            dims: [z, y, x],
            data: grid.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn spatial(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.spatial();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Feature) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    /// Stack the channels of `self` followed by those of `other`.
    pub fn concat_channels(&self, other: &Feature) -> Result<Feature> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                self.dims, other.dims
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Feature {
            channels: self.channels + other.channels,
            dims: self.dims,
            data,
        })
    }

    /// Inverse of [`Feature::concat_channels`]: split after `first` channels.
    pub fn split_channels(&self, first: usize) -> (Feature, Feature) {
        let cut = first * self.spatial();
        (
            Feature {
                channels: first,
                dims: self.dims,
                data: self.data[..cut].to_vec(),
            },
            Feature {
                channels: self.channels - first,
                dims: self.dims,
                data: self.data[cut..].to_vec(),
            },
        )
    }

    pub fn add_assign(&mut self, other: &Feature) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, factor: f64) -> Feature {
        Feature {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

#[inline]
pub(crate) fn flat_index(dims: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Feature::from_vec(1, [1, 1, 2], vec![1.0, 2.0]).unwrap();
        let b = Feature::from_vec(2, [1, 1, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let ab = a.concat_channels(&b).unwrap();
        assert_eq!(ab.channels, 3);
        let (a2, b2) = ab.split_channels(1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Feature::from_vec(2, [1, 2, 2], vec![0.0; 7]).is_err());
    }
}
