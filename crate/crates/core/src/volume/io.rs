//! Native single-file case container.
//!
//! ```text
//! magic        8 bytes   "LSGCASE1"
//! header_len   u32 LE
//! header       UTF-8 JSON (CaseHeader)
//! volume       shape[0]·shape[1]·shape[2] × f32 LE, x fastest
//! mask         mask_shape[0]·mask_shape[1]·mask_shape[2] × u8
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{check_spacing, Mask, Volume};
use crate::error::{Error, Result};

pub const CASE_MAGIC: &[u8; 8] = b"LSGCASE1";
pub const CASE_EXTENSION: &str = "lsgcase";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseHeader {
    pub version: u32,
    pub shape: [usize; 3],
    pub mask_shape: [usize; 3],
    pub spacing: [f64; 3],
    pub case_id: String,
    #[serde(default)]
    pub source_task: String,
    #[serde(default = "two")]
    pub num_classes: usize,
}

fn two() -> usize {
    2
}

pub fn encode_case(volume: &Volume, mask: &Mask) -> Result<Vec<u8>> {
    mask.check_aligned(volume)?;
    let header = CaseHeader {
        version: 1,
        shape: volume.shape(),
        mask_shape: mask.shape(),
        spacing: volume.spacing,
        case_id: volume.case_id.clone(),
        source_task: volume.source_task.clone(),
        num_classes: mask.num_classes,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + volume.data.len() * 5);
    out.extend_from_slice(CASE_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in volume.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(mask.labels.iter().copied());
    Ok(out)
}

pub fn decode_case(bytes: &[u8], path: &Path) -> Result<(Volume, Mask)> {
    if bytes.len() < 12 || &bytes[..8] != CASE_MAGIC {
        return Err(Error::format(path, "missing case magic"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12 + header_len;
    if bytes.len() < body {
        return Err(Error::format(path, "truncated header"));
    }
    let header: CaseHeader =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    check_spacing(header.spacing)?;
    if header.shape != header.mask_shape {
        return Err(Error::Shape(format!(
            "{}: mask shape {:?} differs from volume shape {:?}",
            path.display(),
            header.mask_shape,
            header.shape
        )));
    }
    let n: usize = header.shape.iter().product();
    let expected = body + n * 4 + n;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let floats: Vec<f32> = bytes[body..body + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let labels = bytes[body + 4 * n..].to_vec();
    let [z, y, x] = header.shape;
    let data = Array3::from_shape_vec((z, y, x), floats).expect("length checked");
    let labels = Array3::from_shape_vec((z, y, x), labels).expect("length checked");
    let volume = Volume::new(data, header.spacing, header.case_id, header.source_task)?;
    let mask = Mask::new(labels, header.num_classes)?;
    Ok((volume, mask))
}

pub fn save_case(path: impl AsRef<Path>, volume: &Volume, mask: &Mask) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_case(volume, mask)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a native case file; spacing comes from the header.
pub fn load_case(path: impl AsRef<Path>) -> Result<(Volume, Mask)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_case(&bytes, path)
}

/// All native case files in `dir`, sorted by file name.
pub fn list_cases(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let mut out: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == CASE_EXTENSION))
        .collect();
    out.sort();
    Ok(out)
}
