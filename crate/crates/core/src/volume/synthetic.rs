//! Synthetic lesion phantoms.
//!
//! Every family rasterizes a union of axis-aligned ellipsoids (optionally with
//! an ellipsoidal hole) on a textured background. Geometry is in voxel units.
//! After drawing the base shapes, a common scale factor is searched by
//! bisection so that the foreground fraction lands in the configured range.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Mask, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// One or two solid ellipsoids.
    Blob,
    /// A hollow ellipsoidal rim.
    Shell,
    /// Thin slabs, one semi-axis fixed to half the thickness.
    Plate,
    /// A cluster of small solid ellipsoids.
    Patchy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionFamily {
    pub name: String,
    pub shape: ShapeKind,
    pub dims: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    /// Semi-axis range before rescaling.
    pub radius: (f64, f64),
    /// Rim thickness for shells, slab thickness for plates.
    #[serde(default = "default_thickness")]
    pub thickness: f64,
    pub count: (usize, usize),
    pub background: f64,
    pub contrast: f64,
    #[serde(default)]
    pub texture: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_fraction")]
    pub fg_fraction: (f64, f64),
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}
fn default_thickness() -> f64 {
    2.0
}
fn default_fraction() -> (f64, f64) {
    (0.005, 0.10)
}

impl LesionFamily {
    /// Built-in families on a `dims` grid: `blob`, `shell`, `plate`, `patchy`.
    pub fn preset(name: &str, dims: [usize; 3]) -> Result<Self> {
        let m = dims.iter().copied().min().unwrap_or(1) as f64;
        let base = LesionFamily {
            name: name.to_string(),
            shape: ShapeKind::Blob,
            dims,
            spacing: unit_spacing(),
            radius: (0.15 * m, 0.3 * m),
            thickness: default_thickness(),
            count: (1, 2),
            background: -100.0,
            contrast: 150.0,
            texture: 20.0,
            noise: 15.0,
            fg_fraction: default_fraction(),
        };
        let fam = match name {
            "blob" => base,
            "shell" => LesionFamily {
                shape: ShapeKind::Shell,
                radius: (0.3 * m, 0.42 * m),
                thickness: (0.12 * m).max(1.5),
                count: (1, 1),
                contrast: 130.0,
                ..base
            },
            "plate" => LesionFamily {
                shape: ShapeKind::Plate,
                radius: (0.3 * m, 0.5 * m),
                thickness: (0.15 * m).max(2.0),
                count: (1, 2),
                contrast: 140.0,
                ..base
            },
            "patchy" => LesionFamily {
                shape: ShapeKind::Patchy,
                radius: (0.08 * m, 0.16 * m),
                count: (3, 6),
                contrast: 110.0,
                ..base
            },
            other => return Err(Error::Config(format!("unknown lesion family {other:?}"))),
        };
        Ok(fam)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("family {}: {msg}", self.name)));
        if self.dims.contains(&0) {
            return bad("grid dimensions must be positive");
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return bad("radius range must be positive and ordered");
        }
        if self.count.0 == 0 || self.count.0 > self.count.1 {
            return bad("lesion count range must be positive and ordered");
        }
        let (lo, hi) = self.fg_fraction;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return bad("foreground fraction range must satisfy 0 < lo < hi < 1");
        }
        if self.noise < 0.0 || self.texture < 0.0 || self.thickness <= 0.0 {
            return bad("noise, texture and thickness must be non-negative");
        }
        super::check_spacing(self.spacing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for i in 0..3 {
            let d = (p[i] - self.center[i]) / self.radii[i];
            s += d * d;
        }
        s <= 1.0
    }
}

/// Solid region `outer \ hole`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub outer: Ellipsoid,
    pub hole: Option<Ellipsoid>,
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.outer.contains(p) && !self.hole.is_some_and(|h| h.contains(p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCase {
    pub volume: Volume,
    pub mask: Mask,
    /// Final (rescaled) shapes; the mask is exactly their rasterized union.
    pub shapes: Vec<Shape>,
    pub scale: f64,
}

impl SyntheticCase {
    pub fn into_pair(self) -> (Volume, Mask) {
        (self.volume, self.mask)
    }
}

/// Unscaled draw: center, base radii, and the axis pinned to the slab
/// thickness (plates only).
#[derive(Debug, Clone, Copy)]
struct BaseShape {
    center: [f64; 3],
    radii: [f64; 3],
    thin_axis: Option<usize>,
}

fn draw_base<R: Rng + ?Sized>(fam: &LesionFamily, rng: &mut R) -> Vec<BaseShape> {
    let n = rng.random_range(fam.count.0..=fam.count.1);
    let dims = fam.dims.map(|d| d as f64);
    let mut radius = || {
        if fam.radius.0 == fam.radius.1 {
            fam.radius.0
        } else {
            rng.random_range(fam.radius.0..fam.radius.1)
        }
    };
    let mut radii_set: Vec<[f64; 3]> = (0..n).map(|_| [radius(), radius(), radius()]).collect();
    let mut out = Vec::with_capacity(n);
    let cluster: [f64; 3] = std::array::from_fn(|i| dims[i] * rng.random_range(0.35..0.65));
    for radii in radii_set.drain(..) {
        let center: [f64; 3] = match fam.shape {
            ShapeKind::Patchy => std::array::from_fn(|i| {
                let spread = 0.2 * dims[i];
                (cluster[i] + rng.random_range(-spread..=spread)).clamp(0.0, dims[i] - 1.0)
            }),
            _ => std::array::from_fn(|i| {
                let margin = (0.25 * dims[i]).min(radii[i]);
                let lo = margin.min(dims[i] / 2.0);
                let hi = (dims[i] - 1.0 - margin).max(lo);
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            }),
        };
        let thin_axis = (fam.shape == ShapeKind::Plate).then(|| rng.random_range(0..3));
        out.push(BaseShape {
            center,
            radii,
            thin_axis,
        });
    }
    out
}

fn scaled(fam: &LesionFamily, base: &[BaseShape], s: f64) -> Vec<Shape> {
    base.iter()
        .map(|b| {
            let mut radii = b.radii.map(|r| (r * s).max(0.5));
            if let Some(axis) = b.thin_axis {
                radii[axis] = fam.thickness / 2.0;
            }
            let hole = (fam.shape == ShapeKind::Shell).then(|| Ellipsoid {
                center: b.center,
                radii: radii.map(|r| (r - fam.thickness).max(1e-3)),
            });
            let hole = hole.filter(|h| h.radii.iter().all(|&r| r > 1e-3));
            Shape {
                outer: Ellipsoid { center: b.center, radii },
                hole,
            }
        })
        .collect()
}

/// Rasterize a union of shapes, testing voxel centers `(z, y, x)`.
pub fn rasterize(dims: [usize; 3], shapes: &[Shape]) -> Array3<u8> {
    Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(z, y, x)| {
        let p = [z as f64, y as f64, x as f64];
        u8::from(shapes.iter().any(|s| s.contains(p)))
    })
}

fn fraction(labels: &Array3<u8>) -> f64 {
    labels.iter().filter(|&&v| v > 0).count() as f64 / labels.len() as f64
}

/// One phantom. Deterministic given the generator state.
pub fn gen_synthetic_case<R: Rng + ?Sized>(rng: &mut R, family: &LesionFamily, case_id: &str) -> Result<SyntheticCase> {
    family.validate()?;
    let base = draw_base(family, rng);
    let (lo, hi) = family.fg_fraction;
    let mut s = 1.0;
    let mut shapes = scaled(family, &base, s);
    let mut labels = rasterize(family.dims, &shapes);
    let mut f = fraction(&labels);
    if !(lo..=hi).contains(&f) {
        let target = if f < lo { lo } else { hi };
        let (mut a, mut b) = if f < lo { (1.0, 1.0) } else { (1e-3, 1.0) };
        if f < lo {
            // grow until the fraction exceeds the lower bound
            while fraction(&rasterize(family.dims, &scaled(family, &base, b))) < lo && b < 64.0 {
                a = b;
                b *= 2.0;
            }
        }
        for _ in 0..60 {
            s = 0.5 * (a + b);
            shapes = scaled(family, &base, s);
            labels = rasterize(family.dims, &shapes);
            f = fraction(&labels);
            if (lo..=hi).contains(&f) {
                break;
            }
            if f < target {
                a = s;
            } else {
                b = s;
            }
        }
        if !(lo..=hi).contains(&f) {
            log::warn!(
                "{case_id}: foreground fraction {f:.4} outside [{lo}, {hi}] after rescaling ({})",
                family.name
            );
        }
    }

    let phases: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let freq = std::array::from_fn(|_| rng.random_range(0.05..0.25));
            (freq, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let noise = Normal::new(0.0, family.noise).map_err(|e| Error::Config(e.to_string()))?;
    let dims = family.dims;
    let mut data = Array3::<f32>::zeros((dims[0], dims[1], dims[2]));
    for ((z, y, x), v) in data.indexed_iter_mut() {
        let p = [z as f64, y as f64, x as f64];
        let tex: f64 = phases
            .iter()
            .map(|(fr, ph)| (fr[0] * p[0] + fr[1] * p[1] + fr[2] * p[2] + ph).sin())
            .sum::<f64>()
            / 3.0;
        let mut val = family.background + family.texture * tex;
        if labels[[z, y, x]] > 0 {
            val += family.contrast;
        }
        if family.noise > 0.0 {
            val += noise.sample(rng);
        }
        *v = val as f32;
    }
    let volume = Volume::new(data, family.spacing, case_id, family.name.clone())?;
    let mask = Mask::new(labels, 2)?;
    Ok(SyntheticCase {
        volume,
        mask,
        shapes,
        scale: s,
    })
}

/// `n` phantoms of one family; case `i` uses its own generator seeded from
/// `(seed, family name, i)`, so cohorts are reproducible case by case.
pub fn gen_cohort(family: &LesionFamily, n: usize, seed: u64) -> Result<Vec<(Volume, Mask)>> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(case_seed(seed, &family.name, i));
            let id = format!("{}_{i:03}", family.name);
            gen_synthetic_case(&mut rng, family, &id).map(SyntheticCase::into_pair)
        })
        .collect()
}

pub(crate) fn case_seed(seed: u64, name: &str, i: usize) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    seed.wrapping_mul(0x9e3779b97f4a7c15) ^ h ^ (i as u64).wrapping_mul(0xbf58476d1ce4e5b9)
}

/// Exposed voxel faces per foreground voxel (grid border counts as exposed).
pub fn surface_to_volume(labels: &Array3<u8>) -> f64 {
    let (dz, dy, dx) = labels.dim();
    let mut faces = 0usize;
    let mut count = 0usize;
    for ((z, y, x), &v) in labels.indexed_iter() {
        if v == 0 {
            continue;
        }
        count += 1;
        let nb = [
            (z.checked_sub(1), Some(y), Some(x)),
            ((z + 1 < dz).then_some(z + 1), Some(y), Some(x)),
            (Some(z), y.checked_sub(1), Some(x)),
            (Some(z), (y + 1 < dy).then_some(y + 1), Some(x)),
            (Some(z), Some(y), x.checked_sub(1)),
            (Some(z), Some(y), (x + 1 < dx).then_some(x + 1)),
        ];
        for n in nb {
            match n {
                (Some(a), Some(b), Some(c)) if labels[[a, b, c]] > 0 => {}
                _ => faces += 1,
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        faces as f64 / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: [usize; 3] = [16, 32, 32];

    fn family(name: &str) -> LesionFamily {
        LesionFamily::preset(name, DIMS).unwrap()
    }

    #[test]
    fn noiseless_blob_matches_ellipsoid_membership() {
        let fam = LesionFamily {
            noise: 0.0,
            texture: 0.0,
            ..family("blob")
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = gen_synthetic_case(&mut rng, &fam, "b0").unwrap();
        for ((z, y, x), &l) in c.mask.labels.indexed_iter() {
            let p = [z as f64, y as f64, x as f64];
            let inside = c.shapes.iter().any(|s| {
                let e = s.outer;
                (0..3).map(|i| ((p[i] - e.center[i]) / e.radii[i]).powi(2)).sum::<f64>() <= 1.0
            });
            assert_eq!(l == 1, inside, "voxel {:?}", (z, y, x));
            let expected = if inside { fam.background + fam.contrast } else { fam.background };
            assert_eq!(c.volume.data[[z, y, x]], expected as f32);
        }
    }

    #[test]
    fn fractions_stay_in_range() {
        for name in ["blob", "shell", "plate", "patchy"] {
            let fam = family(name);
            for i in 0..6 {
                let mut rng = ChaCha8Rng::seed_from_u64(case_seed(1, name, i));
                let c = gen_synthetic_case(&mut rng, &fam, "x").unwrap();
                let f = c.mask.foreground_fraction();
                assert!((0.005..=0.10).contains(&f), "{name} case {i}: {f}");
            }
        }
    }

    #[test]
    fn same_seed_same_case() {
        let fam = family("shell");
        let a = gen_cohort(&fam, 2, 9).unwrap();
        let b = gen_cohort(&fam, 2, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].0.data, a[1].0.data);
    }

    #[test]
    fn families_differ_in_surface_to_volume() {
        let mean_ratio = |name: &str| {
            let cases = gen_cohort(&family(name), 8, 2).unwrap();
            cases.iter().map(|(_, m)| surface_to_volume(&m.labels)).sum::<f64>() / cases.len() as f64
        };
        let blob = mean_ratio("blob");
        let shell = mean_ratio("shell");
        let plate = mean_ratio("plate");
        assert!(shell - blob > 0.3, "blob {blob} shell {shell}");
        assert!(plate - blob > 0.3, "blob {blob} plate {plate}");
    }

    #[test]
    fn unknown_family_is_rejected() {
        assert!(LesionFamily::preset("spiky", DIMS).is_err());
    }
}
