//! Boundary voxels and normalized surface distance.
//!
//! Distances are between voxel centers in millimetres, always evaluated as
//! `((dx·sx)² + (dy·sy)²) + (dz·sz)²` so the distance transform and the
//! all-pairs reference agree bit for bit.

use ndarray::Array3;

use crate::error::Result;
use crate::volume::check_spacing;

use super::check_shapes;

/// Foreground voxels with at least one face neighbour outside the
/// foreground; the grid border counts as outside.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSet {
    pub voxels: Vec<[usize; 3]>,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    fn grid(&self) -> Array3<bool> {
        let mut g = Array3::from_elem((self.dims[0], self.dims[1], self.dims[2]), false);
        for v in &self.voxels {
            g[*v] = true;
        }
        g
    }
}

pub fn extract_surface(mask: &Array3<u8>, spacing: [f64; 3]) -> SurfaceSet {
    let (dz, dy, dx) = mask.dim();
    let fg = |z: usize, y: usize, x: usize| mask[[z, y, x]] > 0;
    let mut voxels = Vec::new();
    for ((z, y, x), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        let interior = z > 0
            && z + 1 < dz
            && y > 0
            && y + 1 < dy
            && x > 0
            && x + 1 < dx
            && fg(z - 1, y, x)
            && fg(z + 1, y, x)
            && fg(z, y - 1, x)
            && fg(z, y + 1, x)
            && fg(z, y, x - 1)
            && fg(z, y, x + 1);
        if !interior {
            voxels.push([z, y, x]);
        }
    }
    SurfaceSet {
        voxels,
        dims: [dz, dy, dx],
        spacing,
    }
}

#[inline]
fn sq_dist(a: [usize; 3], b: [usize; 3], s: [f64; 3]) -> f64 {
    let d = |i: usize| (a[i] as f64 - b[i] as f64) * s[i];
    let (z, y, x) = (d(0), d(1), d(2));
    (x * x + y * y) + z * z
}

/// One pass of the lower-envelope transform along a line:
/// `out[q] = min_p ((q − p)·s)² + f[p]`, evaluated with the first term
/// added to the incoming value.
fn envelope_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, zb: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    zb.clear();
    let s2 = s * s;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                zb.push(f64::NEG_INFINITY);
                break;
            };
            let pf = p as f64;
            let inter = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
            if inter <= *zb.last().expect("parallel stacks") {
                v.pop();
                zb.pop();
                if v.is_empty() {
                    v.push(q);
                    zb.push(f64::NEG_INFINITY);
                    break;
                }
            } else {
                v.push(q);
                zb.push(inter);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && zb[k + 1] < q as f64 {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * s;
        *o = d * d + f[v[k]];
    }
}

/// Squared physical distance from every voxel center to the nearest voxel in
/// `sites` (infinite when there are none).
pub fn squared_distance_transform(sites: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let (dz, dy, dx) = sites.dim();
    let mut g = sites.mapv(|b| if b { 0.0 } else { f64::INFINITY });
    let mut v = Vec::new();
    let mut zb = Vec::new();
    // axis order x, y, z builds ((dx·sx)² + (dy·sy)²) + (dz·sz)²
    for (axis, len) in [(2usize, dx), (1, dy), (0, dz)] {
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        let others: Vec<[usize; 2]> = match axis {
            2 => (0..dz).flat_map(|z| (0..dy).map(move |y| [z, y])).collect(),
            1 => (0..dz).flat_map(|z| (0..dx).map(move |x| [z, x])).collect(),
            _ => (0..dy).flat_map(|y| (0..dx).map(move |x| [y, x])).collect(),
        };
        let idx = |o: [usize; 2], i: usize| match axis {
            2 => [o[0], o[1], i],
            1 => [o[0], i, o[1]],
            _ => [i, o[0], o[1]],
        };
        for o in others {
            for (i, l) in line.iter_mut().enumerate() {
                *l = g[idx(o, i)];
            }
            envelope_1d(&line, spacing[axis], &mut out, &mut v, &mut zb);
            for (i, val) in out.iter().enumerate() {
                g[idx(o, i)] = *val;
            }
        }
    }
    g
}

/// Exact neighbourhood check that some site lies within `tau` of `p`.
fn within_exact(p: [usize; 3], sites: &Array3<bool>, spacing: [f64; 3], tau2: f64) -> bool {
    let dims = sites.dim();
    let dims = [dims.0, dims.1, dims.2];
    let reach: [usize; 3] = std::array::from_fn(|i| (tau2.sqrt() / spacing[i]).ceil() as usize + 1);
    let lo: [usize; 3] = std::array::from_fn(|i| p[i].saturating_sub(reach[i]));
    let hi: [usize; 3] = std::array::from_fn(|i| (p[i] + reach[i]).min(dims[i] - 1));
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                if sites[[z, y, x]] && sq_dist(p, [z, y, x], spacing) <= tau2 {
                    return true;
                }
            }
        }
    }
    false
}

/// Number of voxels of `from` whose distance to `to` is at most `tau`.
fn count_within(from: &SurfaceSet, to: &SurfaceSet, tau: f64) -> usize {
    if to.is_empty() {
        return 0;
    }
    let sites = to.grid();
    let dt = squared_distance_transform(&sites, to.spacing);
    let tau2 = tau * tau;
    // the transform's value at a voxel is one candidate distance, so it is an
    // upper bound; only near-ties at the threshold need the exact check
    let slack = tau2 * 1e-9 + 1e-12;
    from.voxels
        .iter()
        .filter(|&&p| {
            let d = dt[p];
            if d <= tau2 {
                true
            } else if d <= tau2 + slack {
                within_exact(p, &sites, to.spacing, tau2)
            } else {
                false
            }
        })
        .count()
}

/// `(|∂A ∩ R_∂B| + |∂B ∩ R_∂A|) / (|∂A| + |∂B|)`; 1 when both masks are
/// empty, 0 when exactly one is.
pub fn nsd(a: &Array3<u8>, b: &Array3<u8>, spacing: [f64; 3], tau_mm: f64) -> Result<f64> {
    check_shapes(a, b)?;
    check_spacing(spacing)?;
    if !(tau_mm >= 0.0) {
        return Err(crate::Error::Config(format!("tolerance {tau_mm} must be non-negative")));
    }
    let sa = extract_surface(a, spacing);
    let sb = extract_surface(b, spacing);
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let hits = count_within(&sa, &sb, tau_mm) + count_within(&sb, &sa, tau_mm);
    Ok(hits as f64 / (sa.len() + sb.len()) as f64)
}

/// All-pairs reference for [`nsd`]; quadratic in the boundary sizes.
pub fn nsd_all_pairs(a: &Array3<u8>, b: &Array3<u8>, spacing: [f64; 3], tau_mm: f64) -> Result<f64> {
    check_shapes(a, b)?;
    let sa = extract_surface(a, spacing);
    let sb = extract_surface(b, spacing);
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let tau2 = tau_mm * tau_mm;
    let hits = |from: &SurfaceSet, to: &SurfaceSet| {
        from.voxels
            .iter()
            .filter(|&&p| {
                to.voxels
                    .iter()
                    .map(|&q| sq_dist(p, q, spacing))
                    .fold(f64::INFINITY, f64::min)
                    <= tau2
            })
            .count()
    };
    Ok((hits(&sa, &sb) + hits(&sb, &sa)) as f64 / (sa.len() + sb.len()) as f64)
}
