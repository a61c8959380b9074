//! Minimal NIfTI-1 import (and export for tests and interchange).
//!
//! Only single-file `.nii` / `.nii.gz` images with three spatial dimensions are
//! supported. Spacing comes from `pixdim[1..=3]`; intensities are scaled by
//! `scl_slope`/`scl_inter` when the slope is nonzero.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;

use super::{Mask, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    /// `(z, y, x)` grid; NIfTI stores x fastest, which matches row-major `(z, y, x)`.
    pub data: Array3<f64>,
    /// `(sz, sy, sx)` in millimetres.
    pub spacing: [f64; 3],
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().expect("4")) == HEADER_SIZE as i32;
    if !le && i32::from_be_bytes(bytes[0..4].try_into().expect("4")) != HEADER_SIZE as i32 {
        return Err(Error::format(path, "sizeof_hdr is not 348"));
    }
    let i16_at = |o: usize| {
        let b: [u8; 2] = bytes[o..o + 2].try_into().expect("2");
        if le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    };
    let f32_at = |o: usize| {
        let b: [u8; 4] = bytes[o..o + 4].try_into().expect("4");
        if le {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let ndim = i16_at(40);
    if !(3..=4).contains(&ndim) {
        return Err(Error::format(path, format!("unsupported dimensionality {ndim}")));
    }
    let (nx, ny, nz) = (i16_at(42) as usize, i16_at(44) as usize, i16_at(46) as usize);
    if ndim == 4 && i16_at(48) > 1 {
        return Err(Error::format(path, "4D images are not supported"));
    }
    let datatype = i16_at(70);
    let spacing = [88, 84, 80].map(|o| f64::from(f32_at(o)).abs());
    let vox_offset = f32_at(108) as usize;
    let (slope, inter) = (f64::from(f32_at(112)), f64::from(f32_at(116)));
    let n = nx * ny * nz;
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 => 4,
        64 => 8,
        other => return Err(Error::format(path, format!("unsupported datatype {other}"))),
    };
    let start = vox_offset.max(HEADER_SIZE);
    if bytes.len() < start + n * width {
        return Err(Error::format(path, "voxel data truncated"));
    }
    let raw = &bytes[start..start + n * width];
    let values: Vec<f64> = raw
        .chunks_exact(width)
        .map(|c| match (datatype, le) {
            (2, _) => f64::from(c[0]),
            (256, _) => f64::from(c[0] as i8),
            (4, true) => f64::from(i16::from_le_bytes([c[0], c[1]])),
            (4, false) => f64::from(i16::from_be_bytes([c[0], c[1]])),
            (512, true) => f64::from(u16::from_le_bytes([c[0], c[1]])),
            (512, false) => f64::from(u16::from_be_bytes([c[0], c[1]])),
            (8, true) => f64::from(i32::from_le_bytes(c.try_into().expect("4"))),
            (8, false) => f64::from(i32::from_be_bytes(c.try_into().expect("4"))),
            (16, true) => f64::from(f32::from_le_bytes(c.try_into().expect("4"))),
            (16, false) => f64::from(f32::from_be_bytes(c.try_into().expect("4"))),
            (64, true) => f64::from_le_bytes(c.try_into().expect("8")),
            (_, _) => f64::from_be_bytes(c.try_into().expect("8")),
        })
        .map(|v| if slope != 0.0 { v * slope + inter } else { v })
        .collect();
    let data = Array3::from_shape_vec((nz, ny, nx), values).expect("length checked");
    Ok(NiftiImage { data, spacing })
}

/// Write a little-endian NIfTI-1 file (`datatype` 16 float32 or 2 uint8);
/// gzip-compressed when the path ends in `.gz`.
pub fn write_nifti(path: impl AsRef<Path>, data: &Array3<f64>, spacing: [f64; 3], as_u8: bool) -> Result<()> {
    let path = path.as_ref();
    let (nz, ny, nx) = data.dim();
    let mut h = vec![0u8; HEADER_SIZE + 4];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dims: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    let (datatype, bitpix): (i16, i16) = if as_u8 { (2, 8) } else { (16, 32) };
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim: [f32; 8] = [1.0, spacing[2] as f32, spacing[1] as f32, spacing[0] as f32, 1.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(352.0f32).to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    for v in data.iter() {
        if as_u8 {
            h.push(v.round().clamp(0.0, 255.0) as u8);
        } else {
            h.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&h).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        h
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Import an image/label pair as a case. Label values are kept; the class
/// count is one more than the largest label (at least two).
pub fn load_nifti_pair(
    image: impl AsRef<Path>,
    label: impl AsRef<Path>,
    case_id: &str,
    source_task: &str,
) -> Result<(Volume, Mask)> {
    let img = read_nifti(image)?;
    let lab = read_nifti(label.as_ref())?;
    if img.data.dim() != lab.data.dim() {
        return Err(Error::Shape(format!(
            "label grid {:?} differs from image grid {:?}",
            lab.data.dim(),
            img.data.dim()
        )));
    }
    let labels = lab.data.mapv(|v| v.round().clamp(0.0, 255.0) as u8);
    let num_classes = usize::from(labels.iter().copied().max().unwrap_or(0)) + 1;
    let volume = Volume::new(img.data.mapv(|v| v as f32), img.spacing, case_id, source_task)?;
    let mask = Mask::new(labels, num_classes.max(2))?;
    Ok((volume, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gzip_round_trip_keeps_grid_and_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((2, 3, 4), |(z, y, x)| (z * 100 + y * 10 + x) as f64 - 50.0);
        let lab = Array3::from_shape_fn((2, 3, 4), |(z, _, x)| f64::from(u8::from(z == 1 && x > 1)));
        let ip = dir.path().join("img.nii.gz");
        let lp = dir.path().join("lab.nii");
        write_nifti(&ip, &img, [2.5, 0.75, 0.7], false).unwrap();
        write_nifti(&lp, &lab, [2.5, 0.75, 0.7], true).unwrap();
        let (v, m) = load_nifti_pair(&ip, &lp, "n0", "nsclc").unwrap();
        assert_eq!(v.shape(), [2, 3, 4]);
        assert_eq!(v.data[[1, 2, 3]], 73.0);
        assert!((v.spacing[0] - 2.5).abs() < 1e-6);
        assert!((v.spacing[1] - 0.75).abs() < 1e-6);
        assert!((v.spacing[2] - 0.7).abs() < 1e-6);
        assert_eq!(m.foreground_count(), 2 * 3);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        std::fs::write(&p, [0u8; 10]).unwrap();
        assert!(read_nifti(&p).is_err());
    }
}
