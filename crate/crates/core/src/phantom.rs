//! Synthetic organ volumes with exact ground truth: one or two rotated
//! ellipsoids, optional spherical holes, Gaussian tissue levels and noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestCase};
use crate::volume::{save_volume, Volume, VolumeShape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: VolumeShape,
    pub spacing_mm: [f64; 3],
    /// Mean and standard deviation of the per-case organ level.
    pub organ_intensity_hu: (f64, f64),
    pub background_intensity_hu: (f64, f64),
    pub n_blobs: usize,
    /// Chance that a blob receives one hole.
    pub hole_probability: f64,
    /// Inclusive range of hole radii.
    pub hole_radius_px: (usize, usize),
    pub noise_std_hu: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: VolumeShape::new(16, 32, 32).unwrap(),
            spacing_mm: [2.5, 0.8, 0.8],
            organ_intensity_hu: (60.0, 10.0),
            background_intensity_hu: (-80.0, 15.0),
            n_blobs: 1,
            hole_probability: 0.3,
            hole_radius_px: (1, 2),
            noise_std_hu: 10.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// No voxel noise and no tissue-level jitter.
    pub fn noiseless(mut self) -> Self {
        self.noise_std_hu = 0.0;
        self.organ_intensity_hu.1 = 0.0;
        self.background_intensity_hu.1 = 0.0;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (om, os) = self.organ_intensity_hu;
        let (bm, bs) = self.background_intensity_hu;
        if os < 0.0 || bs < 0.0 || self.noise_std_hu < 0.0 {
            return Err(Error::invalid("noise_std_hu", "standard deviations must be non-negative"));
        }
        if (om - bm).abs() < 3.0 * os.max(bs) || om == bm {
            return Err(Error::invalid(
                "organ_intensity_hu",
                "organ and background means must differ by at least three times the larger std",
            ));
        }
        for (axis, len) in ["slices", "rows", "cols"].into_iter().zip(self.shape.as_array()) {
            if len % 8 != 0 {
                return Err(Error::Indivisible { dim: axis, len, divisor: 8 });
            }
        }
        if !(1..=2).contains(&self.n_blobs) {
            return Err(Error::invalid("n_blobs", "must be 1 or 2"));
        }
        if !(0.0..=1.0).contains(&self.hole_probability) {
            return Err(Error::invalid("hole_probability", "must lie in [0, 1]"));
        }
        let (lo, hi) = self.hole_radius_px;
        if lo == 0 || lo > hi {
            return Err(Error::invalid("hole_radius_px", "need 1 <= min <= max"));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("spacing_mm", "must be positive"));
        }
        Ok(())
    }
}

/// An ellipsoid with axes along depth and a rotated in-plane pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// In-plane rotation in radians.
    pub angle: f64,
}

impl Ellipsoid {
    pub fn contains(&self, s: f64, r: f64, c: f64) -> bool {
        self.level(s, r, c) <= 1.0
    }

    /// Quadratic form; `<= 1` inside.
    fn level(&self, s: f64, r: f64, c: f64) -> f64 {
        let (dz, dr, dc) = (s - self.center[0], r - self.center[1], c - self.center[2]);
        let (sin, cos) = self.angle.sin_cos();
        let u = dr * cos + dc * sin;
        let v = -dr * sin + dc * cos;
        (dz / self.semi_axes[0]).powi(2) + (u / self.semi_axes[1]).powi(2) + (v / self.semi_axes[2]).powi(2)
    }

    /// Half extents along depth, rows and columns.
    fn extents(&self) -> [f64; 3] {
        let (sin, cos) = self.angle.sin_cos();
        let [a, b, c] = self.semi_axes;
        [a, (b * b * cos * cos + c * c * sin * sin).sqrt(), (b * b * sin * sin + c * c * cos * cos).sqrt()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub gt: Volume,
    pub blobs: Vec<Ellipsoid>,
    /// Hole centres and radii.
    pub holes: Vec<([f64; 3], f64)>,
    /// Tissue levels drawn for this case, before noise.
    pub organ_hu: f64,
    pub background_hu: f64,
}

const MARGIN: f64 = 1.0;
const PLACEMENT_ATTEMPTS: usize = 64;

/// Builds one phantom from `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [ns, nr, nc] = spec.shape.as_array();
    let (regions, col_span) = if spec.n_blobs == 1 {
        (vec![(MARGIN, nc as f64 - 1.0 - MARGIN)], nc as f64)
    } else {
        // Columns half - 1 and half stay empty between the two blobs.
        let half = (nc / 2) as f64;
        (vec![(MARGIN, half - 2.0), (half + 1.0, nc as f64 - 1.0 - MARGIN)], half)
    };

    let mut blobs = Vec::with_capacity(regions.len());
    for &cols in &regions {
        blobs.push(place_blob(&mut rng, [ns as f64, nr as f64], cols, col_span)?);
    }

    let mut holes = Vec::new();
    for blob in &blobs {
        if rng.random_bool(spec.hole_probability) {
            let radius = rng.random_range(spec.hole_radius_px.0..=spec.hole_radius_px.1) as f64;
            if let Some(center) = place_hole(&mut rng, blob, radius) {
                holes.push((center, radius));
            }
        }
    }

    let (om, os) = spec.organ_intensity_hu;
    let (bm, bs) = spec.background_intensity_hu;
    let organ_hu = om + os * Distribution::<f64>::sample(&StandardNormal, &mut rng);
    let background_hu = bm + bs * Distribution::<f64>::sample(&StandardNormal, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std_hu).map_err(|e| Error::invalid("noise_std_hu", e.to_string()))?;

    let mut image = Vec::with_capacity(spec.shape.len());
    let mut gt = Vec::with_capacity(spec.shape.len());
    for s in 0..ns {
        for r in 0..nr {
            for c in 0..nc {
                let (fs, fr, fc) = (s as f64, r as f64, c as f64);
                let in_blob = blobs.iter().any(|b| b.contains(fs, fr, fc));
                let in_hole = holes
                    .iter()
                    .any(|(h, rad)| (fs - h[0]).powi(2) + (fr - h[1]).powi(2) + (fc - h[2]).powi(2) <= rad * rad);
                let organ = in_blob && !in_hole;
                let level = if organ { organ_hu } else { background_hu };
                let value = if spec.noise_std_hu > 0.0 { level + noise.sample(&mut rng) } else { level };
                image.push(value.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16);
                gt.push(u8::from(organ));
            }
        }
    }
    Ok(Phantom {
        image: Volume::hu(spec.shape, spec.spacing_mm, image)?,
        gt: Volume::labels(spec.shape, spec.spacing_mm, gt)?,
        blobs,
        holes,
        organ_hu,
        background_hu,
    })
}

fn place_blob(rng: &mut ChaCha8Rng, dims: [f64; 2], cols: (f64, f64), col_span: f64) -> Result<Ellipsoid> {
    let [ns, nr] = dims;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let semi_axes = [
            rng.random_range(0.25..0.4) * ns,
            rng.random_range(0.18..0.32) * nr,
            rng.random_range(0.18..0.32) * col_span,
        ];
        let angle = rng.random_range(0.0..PI);
        let ext = Ellipsoid { center: [0.0; 3], semi_axes, angle }.extents();
        let ranges = [
            (MARGIN + ext[0], ns - 1.0 - MARGIN - ext[0]),
            (MARGIN + ext[1], nr - 1.0 - MARGIN - ext[1]),
            (cols.0 + ext[2], cols.1 - ext[2]),
        ];
        if ranges.iter().any(|(lo, hi)| lo > hi) {
            continue;
        }
        let center = ranges.map(|(lo, hi)| rng.random_range(lo..=hi));
        return Ok(Ellipsoid { center, semi_axes, angle });
    }
    Err(Error::PhantomFit(format!(
        "no ellipsoid fits a {ns}x{nr} volume between columns {} and {} after {PLACEMENT_ATTEMPTS} attempts",
        cols.0, cols.1
    )))
}

/// Grid points within `radius` of `center`.
fn ball_voxels(center: [f64; 3], radius: f64) -> impl Iterator<Item = [f64; 3]> {
    let lo = center.map(|c| (c - radius).ceil() as i64);
    let hi = center.map(|c| (c + radius).floor() as i64);
    (lo[0]..=hi[0]).flat_map(move |s| {
        (lo[1]..=hi[1]).flat_map(move |r| (lo[2]..=hi[2]).map(move |c| [s as f64, r as f64, c as f64]))
    })
    .filter(move |p| (0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>() <= radius * radius)
}

/// A sphere centre whose carved voxels and their six neighbours all lie in
/// `blob`, so every hole voxel is enclosed by organ.
fn place_hole(rng: &mut ChaCha8Rng, blob: &Ellipsoid, radius: f64) -> Option<[f64; 3]> {
    let ext = blob.extents();
    for _ in 0..PLACEMENT_ATTEMPTS {
        let center: [f64; 3] = std::array::from_fn(|a| {
            let half = ext[a] - radius - 1.0;
            blob.center[a] + if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 }
        });
        let enclosed = ball_voxels(center, radius).all(|[s, r, c]| {
            [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]
                .iter()
                .all(|d| blob.contains(s + d[0], r + d[1], c + d[2]))
        });
        if enclosed {
            return Some(center);
        }
    }
    None
}

/// Writes `n` phantoms with seeds `spec.seed .. spec.seed + n` into
/// `out_dir` and returns their manifest (paths relative to `out_dir`).
pub fn generate_corpus(n: usize, spec: &PhantomSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let mut manifest = Manifest::default();
    if n == 0 {
        return Ok(manifest);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for i in 0..n {
        let case_spec = spec.clone().with_seed(spec.seed.wrapping_add(i as u64));
        let p = generate_phantom(&case_spec)?;
        let id = format!("phantom_{i:03}");
        let (image, gt) = (format!("{id}_image.json"), format!("{id}_gt.json"));
        save_volume(&p.image, out_dir.join(&image))?;
        save_volume(&p.gt, out_dir.join(&gt))?;
        manifest.cases.push(ManifestCase { id, image, gt: Some(gt), ..ManifestCase::default() });
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::score_case;
    use crate::preprocess::{make_bounding_boxes, window_normalize, DEFAULT_BOX_MARGIN};
    use crate::pseudo_mask::{generate_pseudo_mask, PseudoMaskParams};
    use crate::volume::binarize;

    #[test]
    fn noiseless_gt_is_exactly_the_organ_level() {
        for seed in 0..20 {
            let spec = PhantomSpec { hole_probability: 0.0, ..PhantomSpec::default() }.noiseless().with_seed(seed);
            let p = generate_phantom(&spec).unwrap();
            assert_eq!(p.organ_hu, 60.0);
            let hu = p.image.as_hu().unwrap();
            for (v, g) in hu.iter().zip(p.gt.as_labels().unwrap()) {
                assert_eq!(*g == 1, *v == 60);
            }
            // Without voxel noise but with level jitter the split is still exact.
            let spec = PhantomSpec { noise_std_hu: 0.0, ..PhantomSpec::default() }.with_seed(seed);
            let p = generate_phantom(&spec).unwrap();
            let organ = p.organ_hu.round() as i16;
            assert_ne!(organ, p.background_hu.round() as i16);
            for (v, g) in p.image.as_hu().unwrap().iter().zip(p.gt.as_labels().unwrap()) {
                assert_eq!(*g == 1, *v == organ);
            }
        }
    }

    #[test]
    fn holes_are_background_and_enclosed() {
        let spec = PhantomSpec { hole_probability: 1.0, hole_radius_px: (2, 2), ..PhantomSpec::default() }.noiseless();
        let mut seen = 0;
        for seed in 0..20 {
            let p = generate_phantom(&spec.clone().with_seed(seed)).unwrap();
            let shape = p.gt.shape();
            let gt = p.gt.as_labels().unwrap();
            for &(center, radius) in &p.holes {
                seen += 1;
                for [s, r, c] in ball_voxels(center, radius) {
                    assert_eq!(gt[shape.index(s as usize, r as usize, c as usize)], 0);
                    assert!(p.blobs.iter().any(|b| b.contains(s, r, c)));
                }
            }
        }
        assert!(seen >= 10, "only {seen} holes placed");
    }

    #[test]
    fn organ_fraction_is_moderate() {
        for seed in 0..100 {
            for n_blobs in [1, 2] {
                let p = generate_phantom(&PhantomSpec { n_blobs, ..PhantomSpec::default() }.with_seed(seed)).unwrap();
                let gt = p.gt.as_labels().unwrap();
                let frac = gt.iter().filter(|&&v| v == 1).count() as f64 / gt.len() as f64;
                assert!((0.01..=0.5).contains(&frac), "seed {seed}, {n_blobs} blobs: {frac}");
            }
        }
    }

    #[test]
    fn two_blobs_leave_a_column_gap() {
        for seed in 0..30 {
            let p = generate_phantom(&PhantomSpec { n_blobs: 2, ..PhantomSpec::default() }.with_seed(seed)).unwrap();
            let shape = p.gt.shape();
            let gt = p.gt.as_labels().unwrap();
            let half = shape.cols / 2;
            for s in 0..shape.slices {
                for r in 0..shape.rows {
                    assert_eq!(gt[shape.index(s, r, half - 1)], 0);
                    assert_eq!(gt[shape.index(s, r, half)], 0);
                }
            }
            let left = (0..gt.len()).any(|i| gt[i] == 1 && i % shape.cols < half);
            let right = (0..gt.len()).any(|i| gt[i] == 1 && i % shape.cols >= half);
            assert!(left && right);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = PhantomSpec::default().with_seed(7);
        assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
        assert_ne!(generate_phantom(&spec).unwrap().image, generate_phantom(&spec.with_seed(8)).unwrap().image);
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = PhantomSpec::default();
        let bad = [
            PhantomSpec { organ_intensity_hu: (0.0, 10.0), background_intensity_hu: (20.0, 10.0), ..base.clone() },
            PhantomSpec { shape: VolumeShape::new(12, 32, 32).unwrap(), ..base.clone() },
            PhantomSpec { n_blobs: 3, ..base.clone() },
            PhantomSpec { hole_probability: 1.5, ..base.clone() },
            PhantomSpec { hole_radius_px: (3, 2), ..base.clone() },
            PhantomSpec { noise_std_hu: -1.0, ..base.clone() },
        ];
        for spec in bad {
            assert!(generate_phantom(&spec).is_err(), "{spec:?}");
        }
        let tiny = PhantomSpec { shape: VolumeShape::new(8, 8, 8).unwrap(), n_blobs: 2, ..base };
        assert!(matches!(generate_phantom(&tiny), Err(Error::PhantomFit(_))));
    }

    #[test]
    fn noiseless_pseudo_masks_match_ground_truth() {
        let spec = PhantomSpec::default().noiseless();
        // Two intensity levels: k = 3 is infeasible and k = 2 decides alone.
        let params = PseudoMaskParams::default();
        for seed in 0..5 {
            let p = generate_phantom(&spec.clone().with_seed(seed)).unwrap();
            let image = window_normalize(&p.image, (-60.0, 140.0)).unwrap();
            let boxes = make_bounding_boxes(&p.gt, DEFAULT_BOX_MARGIN, false).unwrap();
            let mask = generate_pseudo_mask(&image, &boxes, &params).unwrap();
            let score = score_case("p", &binarize(&mask, 0.5).unwrap(), &p.gt).unwrap();
            assert!(score.dsc >= 95.0, "seed {seed}: {}", score.dsc);
        }
    }

    #[test]
    fn corpus_layout() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_corpus(0, &PhantomSpec::default(), dir.path().join("empty")).unwrap().cases.is_empty());
        assert!(!dir.path().join("empty").exists());
        let m = generate_corpus(3, &PhantomSpec::default().with_seed(10), dir.path()).unwrap();
        assert_eq!(m.cases.len(), 3);
        let second = crate::volume::load_volume(dir.path().join(&m.cases[1].image)).unwrap();
        assert_eq!(second, generate_phantom(&PhantomSpec::default().with_seed(11)).unwrap().image);
        assert!(dir.path().join(m.cases[2].gt.as_ref().unwrap()).exists());
    }
}
