//! Intensity windowing, organ-slab extraction, resizing and bounding-box
//! synthesis from dense ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{linear_taps, nearest_index};
use crate::volume::{SliceBox, SliceBoxSet, Volume, VolumeData, VolumeShape};

/// Default bounding-box margin in pixels.
pub const DEFAULT_BOX_MARGIN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Organ {
    Liver,
    Spleen,
    Kidneys,
}

impl Organ {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "liver" => Ok(Organ::Liver),
            "spleen" => Ok(Organ::Spleen),
            "kidneys" | "kidney" => Ok(Organ::Kidneys),
            other => Err(Error::invalid("organ", format!("unknown organ `{other}`"))),
        }
    }
}

/// Per-organ preprocessing and clustering presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganProfile {
    pub name: Organ,
    /// (low, high) in Hounsfield units.
    pub hu_window: (f64, f64),
    pub kmeans_ks: Vec<usize>,
    pub target_shape: VolumeShape,
}

/// Optional fields of a profile override file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileOverrides {
    pub hu_window: Option<(f64, f64)>,
    pub ks: Option<Vec<usize>>,
    pub target_shape: Option<VolumeShape>,
}

impl OrganProfile {
    pub fn preset(organ: Organ) -> Self {
        let (hu_window, ks, slices) = match organ {
            Organ::Liver => ((-60.0, 140.0), vec![3, 4], 40),
            Organ::Spleen => ((-115.0, 185.0), vec![2, 3], 31),
            Organ::Kidneys => ((-95.0, 155.0), vec![2, 3], 40),
        };
        Self {
            name: organ,
            hu_window,
            kmeans_ks: ks,
            target_shape: VolumeShape { slices, rows: 512, cols: 512 },
        }
    }

    pub fn with_overrides(mut self, o: &ProfileOverrides) -> Result<Self> {
        if let Some(w) = o.hu_window {
            self.hu_window = w;
        }
        if let Some(ks) = &o.ks {
            self.kmeans_ks = ks.clone();
        }
        if let Some(t) = o.target_shape {
            self.target_shape = t;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.hu_window;
        if !(lo < hi) {
            return Err(Error::invalid("hu_window", format!("low {lo} must be below high {hi}")));
        }
        let ks = &self.kmeans_ks;
        if ks.len() != 2 || ks[0] == ks[1] || ks.iter().any(|&k| k < 2) {
            return Err(Error::invalid("ks", format!("need two distinct values >= 2, got {ks:?}")));
        }
        Ok(())
    }
}

/// Clamps HU to `window` and rescales it onto [0, 1].
pub fn window_normalize(vol: &Volume, window: (f64, f64)) -> Result<Volume> {
    let (low, high) = window;
    if !(low < high) {
        return Err(Error::invalid("window", format!("degenerate window ({low}, {high})")));
    }
    let width = high - low;
    let data = vol
        .as_hu()?
        .iter()
        .map(|&v| {
            let v = v as f64;
            if v <= low {
                0.0
            } else if v >= high {
                1.0
            } else {
                ((v - low) / width) as f32
            }
        })
        .collect();
    Volume::normalized(vol.shape(), vol.spacing_mm(), data)
}

/// Inclusive slice interval of a slab within its source volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRange {
    pub first: usize,
    pub last: usize,
}

impl SliceRange {
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// What decides which slices belong to the organ.
#[derive(Clone, Copy, Debug)]
pub enum SlabReference<'a> {
    Labels(&'a Volume),
    Boxes(&'a SliceBoxSet),
}

impl SlabReference<'_> {
    fn shape(&self) -> VolumeShape {
        match self {
            SlabReference::Labels(v) => v.shape(),
            SlabReference::Boxes(b) => b.shape(),
        }
    }

    fn occupied(&self) -> Result<Vec<bool>> {
        let shape = self.shape();
        match self {
            SlabReference::Labels(v) => {
                let labels = v.as_labels()?;
                Ok(labels.chunks(shape.slice_len()).map(|s| s.iter().any(|&x| x != 0)).collect())
            }
            SlabReference::Boxes(b) => {
                Ok((0..shape.slices).map(|s| !b.slice(s).is_empty()).collect())
            }
        }
    }
}

/// Crops `vol` to the contiguous run of slices spanning every annotated slice.
pub fn extract_organ_slab(vol: &Volume, reference: SlabReference<'_>) -> Result<(Volume, SliceRange)> {
    if reference.shape() != vol.shape() {
        return Err(Error::ShapeMismatch(format!(
            "reference {} vs volume {}",
            reference.shape(),
            vol.shape()
        )));
    }
    let occupied = reference.occupied()?;
    let first = occupied.iter().position(|&o| o).ok_or(Error::NoForeground)?;
    let last = occupied.iter().rposition(|&o| o).ok_or(Error::NoForeground)?;
    let range = SliceRange { first, last };
    Ok((crop_slices(vol, range)?, range))
}

pub fn crop_slices(vol: &Volume, range: SliceRange) -> Result<Volume> {
    let shape = vol.shape();
    if range.first > range.last || range.last >= shape.slices {
        return Err(Error::invalid("range", format!("{range:?} outside {} slices", shape.slices)));
    }
    let n = shape.slice_len();
    let span = range.first * n..(range.last + 1) * n;
    let out_shape = VolumeShape::new(range.len(), shape.rows, shape.cols)?;
    let data = match vol.data() {
        VolumeData::Hu(v) => VolumeData::Hu(v[span].to_vec()),
        VolumeData::Normalized(v) => VolumeData::Normalized(v[span].to_vec()),
        VolumeData::Label(v) => VolumeData::Label(v[span].to_vec()),
        VolumeData::Soft(v) => VolumeData::Soft(v[span].to_vec()),
    };
    Volume::new(out_shape, vol.spacing_mm(), data)
}

/// Places a slab back at `range` inside a zero-filled volume of `slices` slices.
pub fn embed_slab(slab: &Volume, range: SliceRange, slices: usize) -> Result<Volume> {
    let shape = slab.shape();
    if range.len() != shape.slices || range.last >= slices {
        return Err(Error::ShapeMismatch(format!(
            "slab of {} slices cannot fill {range:?} in {slices} slices",
            shape.slices
        )));
    }
    let full = VolumeShape::new(slices, shape.rows, shape.cols)?;
    let offset = range.first * shape.slice_len();
    fn place<T: Copy + Default>(src: &[T], len: usize, offset: usize) -> Vec<T> {
        let mut out = vec![T::default(); len];
        out[offset..offset + src.len()].copy_from_slice(src);
        out
    }
    let data = match slab.data() {
        VolumeData::Hu(v) => VolumeData::Hu(place(v, full.len(), offset)),
        VolumeData::Normalized(v) => VolumeData::Normalized(place(v, full.len(), offset)),
        VolumeData::Label(v) => VolumeData::Label(place(v, full.len(), offset)),
        VolumeData::Soft(v) => VolumeData::Soft(place(v, full.len(), offset)),
    };
    Volume::new(full, slab.spacing_mm(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Trilinear,
    Nearest,
}

/// Resamples onto `target` with half-pixel-centred coordinates. Spacing is
/// scaled so the physical extent is preserved.
pub fn resize_volume(vol: &Volume, target: VolumeShape, mode: ResizeMode) -> Result<Volume> {
    let src = vol.shape();
    if mode == ResizeMode::Trilinear && matches!(vol.data(), VolumeData::Label(_)) {
        return Err(Error::invalid("mode", "trilinear resizing of hard labels would invent values"));
    }
    let spacing = vol.spacing_mm();
    let spacing = [
        spacing[0] * src.slices as f64 / target.slices as f64,
        spacing[1] * src.rows as f64 / target.rows as f64,
        spacing[2] * src.cols as f64 / target.cols as f64,
    ];
    let data = match mode {
        ResizeMode::Nearest => {
            let lookup = nearest_lookup(src, target);
            match vol.data() {
                VolumeData::Hu(v) => VolumeData::Hu(lookup.iter().map(|&i| v[i]).collect()),
                VolumeData::Normalized(v) => {
                    VolumeData::Normalized(lookup.iter().map(|&i| v[i]).collect())
                }
                VolumeData::Label(v) => VolumeData::Label(lookup.iter().map(|&i| v[i]).collect()),
                VolumeData::Soft(v) => VolumeData::Soft(lookup.iter().map(|&i| v[i]).collect()),
            }
        }
        ResizeMode::Trilinear => {
            let values = trilinear(&vol.to_f64_vec(), src, target);
            match vol.data() {
                VolumeData::Hu(_) => VolumeData::Hu(
                    values.iter().map(|&x| x.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).collect(),
                ),
                VolumeData::Normalized(_) => {
                    VolumeData::Normalized(values.iter().map(|&x| x.clamp(0.0, 1.0) as f32).collect())
                }
                VolumeData::Soft(_) => {
                    VolumeData::Soft(values.iter().map(|&x| x.clamp(0.0, 1.0) as f32).collect())
                }
                VolumeData::Label(_) => unreachable!("rejected above"),
            }
        }
    };
    Volume::new(target, spacing, data)
}

fn nearest_lookup(src: VolumeShape, dst: VolumeShape) -> Vec<usize> {
    let mut out = Vec::with_capacity(dst.len());
    for s in 0..dst.slices {
        let ss = nearest_index(src.slices, dst.slices, s);
        for r in 0..dst.rows {
            let rr = nearest_index(src.rows, dst.rows, r);
            for c in 0..dst.cols {
                out.push(src.index(ss, rr, nearest_index(src.cols, dst.cols, c)));
            }
        }
    }
    out
}

/// Separable trilinear resampling of a slice-major grid.
pub(crate) fn trilinear(values: &[f64], src: VolumeShape, dst: VolumeShape) -> Vec<f64> {
    let ts = linear_taps(src.slices, dst.slices);
    let tr = linear_taps(src.rows, dst.rows);
    let tc = linear_taps(src.cols, dst.cols);
    let mut out = Vec::with_capacity(dst.len());
    for s in &ts {
        for r in &tr {
            for c in &tc {
                let at = |si: usize, ri: usize, ci: usize| values[src.index(si, ri, ci)];
                let plane = |si: usize| {
                    let top = at(si, r.lo, c.lo) * (1.0 - c.frac) + at(si, r.lo, c.hi) * c.frac;
                    let bottom = at(si, r.hi, c.lo) * (1.0 - c.frac) + at(si, r.hi, c.hi) * c.frac;
                    top * (1.0 - r.frac) + bottom * r.frac
                };
                out.push(plane(s.lo) * (1.0 - s.frac) + plane(s.hi) * s.frac);
            }
        }
    }
    out
}

/// Per-slice bounding rectangles of the ground truth, grown by `margin_px`
/// on every side and clipped to the image.
///
/// With `split_lr` the foreground of each slice is split into a left and a
/// right group at the column median (moved into the empty column gap nearest
/// to it, when the slice has one); each nonempty group gets its own box and
/// neither box crosses the split column.
pub fn make_bounding_boxes(gt: &Volume, margin_px: usize, split_lr: bool) -> Result<SliceBoxSet> {
    let shape = gt.shape();
    let labels = gt.as_labels()?;
    let mut boxes = BTreeMap::new();
    for s in 0..shape.slices {
        let slice = &labels[s * shape.slice_len()..(s + 1) * shape.slice_len()];
        let pixels: Vec<(usize, usize)> = slice
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| (i / shape.cols, i % shape.cols))
            .collect();
        if pixels.is_empty() {
            continue;
        }
        let mut list = Vec::new();
        match split_column(&pixels, shape.cols).filter(|_| split_lr) {
            Some(split) => {
                let (left, right): (Vec<_>, Vec<_>) = pixels.iter().partition(|p| p.1 < split);
                if let Some(mut b) = grown_box(s, &left, margin_px, shape) {
                    b.col_max = b.col_max.min(split - 1);
                    list.push(b);
                }
                if let Some(mut b) = grown_box(s, &right, margin_px, shape) {
                    b.col_min = b.col_min.max(split);
                    list.push(b);
                }
            }
            None => list.extend(grown_box(s, &pixels, margin_px, shape)),
        }
        boxes.insert(s, list);
    }
    SliceBoxSet::new(shape, boxes)
}

/// First column of the right-hand group, or `None` if everything sits in
/// one column.
fn split_column(pixels: &[(usize, usize)], cols: usize) -> Option<usize> {
    let mut cs: Vec<usize> = pixels.iter().map(|p| p.1).collect();
    cs.sort_unstable();
    let (lo, hi) = (cs[0], cs[cs.len() - 1]);
    if lo == hi {
        return None;
    }
    let median = cs[cs.len() / 2].max(lo + 1);
    let mut occupied = vec![false; cols];
    for &c in &cs {
        occupied[c] = true;
    }
    // Empty gaps strictly between the extremes, as [start, end) column runs.
    let mut best: Option<(usize, usize)> = None;
    let mut c = lo;
    while c < hi {
        if occupied[c] {
            c += 1;
            continue;
        }
        let start = c;
        while !occupied[c] {
            c += 1;
        }
        let mid = (start + c).div_ceil(2);
        let dist = mid.abs_diff(median);
        if best.is_none_or(|(d, _)| dist < d) {
            best = Some((dist, mid));
        }
    }
    Some(best.map(|(_, m)| m).unwrap_or(median))
}

fn grown_box(slice: usize, pixels: &[(usize, usize)], margin: usize, shape: VolumeShape) -> Option<SliceBox> {
    let first = pixels.first()?;
    let (mut r0, mut r1, mut c0, mut c1) = (first.0, first.0, first.1, first.1);
    for &(r, c) in pixels {
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    Some(SliceBox {
        slice_index: slice,
        row_min: r0.saturating_sub(margin),
        col_min: c0.saturating_sub(margin),
        row_max: (r1 + margin).min(shape.rows - 1),
        col_max: (c1 + margin).min(shape.cols - 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(s: usize, r: usize, c: usize) -> VolumeShape {
        VolumeShape::new(s, r, c).unwrap()
    }

    fn hu(values: &[i16]) -> Volume {
        Volume::hu(shape(1, 1, values.len()), [1.0; 3], values.to_vec()).unwrap()
    }

    #[test]
    fn liver_window_values() {
        let out = window_normalize(&hu(&[200, -60, 40, -1000]), (-60.0, 140.0)).unwrap();
        assert_eq!(out.as_f32().unwrap(), &[1.0, 0.0, 0.5, 0.0]);
        assert!(window_normalize(&hu(&[0]), (10.0, 10.0)).is_err());
    }

    #[test]
    fn presets_are_valid() {
        for organ in [Organ::Liver, Organ::Spleen, Organ::Kidneys] {
            OrganProfile::preset(organ).validate().unwrap();
        }
        assert_eq!(OrganProfile::preset(Organ::Spleen).target_shape.slices, 31);
        let bad = ProfileOverrides { ks: Some(vec![3, 3]), ..Default::default() };
        assert!(OrganProfile::preset(Organ::Liver).with_overrides(&bad).is_err());
        let o: ProfileOverrides =
            serde_json::from_str(r#"{"hu_window":[-10,90],"ks":[2,5],"target_shape":[8,16,16]}"#).unwrap();
        let p = OrganProfile::preset(Organ::Liver).with_overrides(&o).unwrap();
        assert_eq!(p.hu_window, (-10.0, 90.0));
        assert_eq!(p.target_shape, shape(8, 16, 16));
    }

    fn labels_on_slices(total: usize, on: &[usize]) -> Volume {
        let s = shape(total, 4, 4);
        let mut data = vec![0u8; s.len()];
        for &i in on {
            data[s.index(i, 1, 2)] = 1;
        }
        Volume::labels(s, [1.0; 3], data).unwrap()
    }

    #[test]
    fn slab_range_and_crop() {
        let gt = labels_on_slices(12, &[3, 5, 7]);
        let (slab, range) = extract_organ_slab(&gt, SlabReference::Labels(&gt)).unwrap();
        assert_eq!(range, SliceRange { first: 3, last: 7 });
        assert_eq!(slab.shape().slices, 5);

        let full = labels_on_slices(4, &[0, 1, 2, 3]);
        let (same, r) = extract_organ_slab(&full, SlabReference::Labels(&full)).unwrap();
        assert_eq!(same, full);
        assert_eq!(r, SliceRange { first: 0, last: 3 });

        let empty = labels_on_slices(4, &[]);
        assert!(matches!(
            extract_organ_slab(&empty, SlabReference::Labels(&empty)),
            Err(Error::NoForeground)
        ));
    }

    #[test]
    fn slab_from_boxes_and_reembedding() {
        let gt = labels_on_slices(10, &[2, 6]);
        let boxes = make_bounding_boxes(&gt, 0, false).unwrap();
        let (slab, range) = extract_organ_slab(&gt, SlabReference::Boxes(&boxes)).unwrap();
        assert_eq!(range, SliceRange { first: 2, last: 6 });
        assert_eq!(embed_slab(&slab, range, 10).unwrap(), gt);
    }

    #[test]
    fn slab_ranges_match_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(1..20);
            let on: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.2)).collect();
            let gt = labels_on_slices(n, &on);
            let got = extract_organ_slab(&gt, SlabReference::Labels(&gt));
            match (on.first(), on.last()) {
                (Some(&a), Some(&b)) => {
                    assert_eq!(got.unwrap().1, SliceRange { first: a, last: b })
                }
                _ => assert!(got.is_err()),
            }
        }
    }

    #[test]
    fn trilinear_doubling_row() {
        let v = Volume::normalized(shape(1, 2, 2), [1.0; 3], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = resize_volume(&v, shape(1, 2, 4), ResizeMode::Trilinear).unwrap();
        assert_eq!(out.as_f32().unwrap(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
        assert_eq!(out.spacing_mm(), [1.0, 1.0, 0.5]);
    }

    /// Direct per-voxel evaluation of the half-pixel trilinear formula.
    fn reference_sample(values: &[f64], src: VolumeShape, pos: [f64; 3]) -> f64 {
        let dims = [src.slices, src.rows, src.cols];
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let p = pos[a].max(0.0);
                let lo = (p.floor() as usize).min(dims[a] - 1);
                let hi = (lo + 1).min(dims[a] - 1);
                let t = if hi == lo { 0.0 } else { p - lo as f64 };
                let take_hi = corner >> a & 1 == 1;
                idx[a] = if take_hi { hi } else { lo };
                w *= if take_hi { t } else { 1.0 - t };
            }
            acc += w * values[src.index(idx[0], idx[1], idx[2])];
        }
        acc
    }

    #[test]
    fn trilinear_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let src = shape(rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
            let dst = shape(rng.random_range(1..7), rng.random_range(1..8), rng.random_range(1..8));
            let vals: Vec<f64> = (0..src.len()).map(|_| rng.random()).collect();
            let got = trilinear(&vals, src, dst);
            let sd = [src.slices, src.rows, src.cols];
            let dd = [dst.slices, dst.rows, dst.cols];
            for s in 0..dst.slices {
                for r in 0..dst.rows {
                    for c in 0..dst.cols {
                        let o = [s, r, c];
                        let pos: [f64; 3] = std::array::from_fn(|a| {
                            (o[a] as f64 + 0.5) * sd[a] as f64 / dd[a] as f64 - 0.5
                        });
                        let want = reference_sample(&vals, src, pos);
                        assert!((got[dst.index(s, r, c)] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn resize_identity_constant_and_label_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = shape(3, 4, 5);
        let v = Volume::normalized(s, [2.0, 1.0, 1.0], (0..s.len()).map(|_| rng.random()).collect()).unwrap();
        for mode in [ResizeMode::Trilinear, ResizeMode::Nearest] {
            assert_eq!(resize_volume(&v, s, mode).unwrap(), v);
        }
        let c = Volume::hu(s, [1.0; 3], vec![42; s.len()]).unwrap();
        let out = resize_volume(&c, shape(7, 3, 9), ResizeMode::Trilinear).unwrap();
        assert!(out.as_hu().unwrap().iter().all(|&x| x == 42));

        let labels = Volume::labels(s, [1.0; 3], (0..s.len()).map(|i| (i % 2) as u8).collect()).unwrap();
        assert!(resize_volume(&labels, shape(6, 8, 10), ResizeMode::Trilinear).is_err());
        let up = resize_volume(&labels, shape(6, 8, 10), ResizeMode::Nearest).unwrap();
        assert!(up.as_labels().unwrap().iter().all(|&x| x <= 1));
    }

    fn gt_rect(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>, size: usize) -> Volume {
        let s = shape(1, size, size);
        let mut data = vec![0u8; s.len()];
        for r in rows {
            for c in cols.clone() {
                data[s.index(0, r, c)] = 1;
            }
        }
        Volume::labels(s, [1.0; 3], data).unwrap()
    }

    #[test]
    fn box_margin_arithmetic_and_clipping() {
        let boxes = make_bounding_boxes(&gt_rect(10..=20, 30..=40, 512), 5, false).unwrap();
        let b = boxes.slice(0)[0];
        assert_eq!((b.row_min, b.row_max, b.col_min, b.col_max), (5, 25, 25, 45));

        let boxes = make_bounding_boxes(&gt_rect(0..=3, 8..=9, 20), 5, false).unwrap();
        let b = boxes.slice(0)[0];
        assert_eq!((b.row_min, b.row_max, b.col_min, b.col_max), (0, 8, 3, 14));
    }

    #[test]
    fn kidney_pair_gets_two_disjoint_boxes() {
        // Left blob cols 2..=6, right blob cols 10..=20 (unequal sizes).
        let s = shape(1, 24, 24);
        let mut data = vec![0u8; s.len()];
        for r in 8..=14 {
            for c in (2..=6).chain(10..=20) {
                data[s.index(0, r, c)] = 1;
            }
        }
        let gt = Volume::labels(s, [1.0; 3], data).unwrap();
        let boxes = make_bounding_boxes(&gt, 5, true).unwrap();
        let list = boxes.slice(0);
        assert_eq!(list.len(), 2);
        assert!(!list[0].intersects(&list[1]));
        assert!(list[0].contains(8, 2) && list[0].contains(14, 6));
        assert!(list[1].contains(8, 10) && list[1].contains(14, 20));
        // Without splitting there is a single box.
        assert_eq!(make_bounding_boxes(&gt, 5, false).unwrap().slice(0).len(), 1);
    }

    proptest! {
        #[test]
        fn window_is_monotone_and_bounded(a in -2000i16..3000, b in -2000i16..3000, lo in -500.0f64..0.0, width in 1.0f64..600.0) {
            let out = window_normalize(&hu(&[a, b]), (lo, lo + width)).unwrap();
            let v = out.as_f32().unwrap();
            prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
            if a <= b { prop_assert!(v[0] <= v[1]); }
        }

        #[test]
        fn boxes_cover_ground_truth(bits in prop::collection::vec(prop::bool::weighted(0.15), 3 * 16 * 16), margin in 0usize..6, split in any::<bool>()) {
            let s = shape(3, 16, 16);
            let gt = Volume::labels(s, [1.0; 3], bits.iter().map(|&b| u8::from(b)).collect()).unwrap();
            let boxes = make_bounding_boxes(&gt, margin, split).unwrap();
            for sl in 0..3 {
                for r in 0..16 {
                    for c in 0..16 {
                        if gt.as_labels().unwrap()[s.index(sl, r, c)] == 1 {
                            prop_assert!(boxes.slice(sl).iter().any(|b| b.contains(r, c)));
                        }
                    }
                }
            }
        }

        #[test]
        fn nearest_preserves_value_set(vals in prop::collection::vec(0u8..2, 24), s0 in 1usize..6, s1 in 1usize..9, s2 in 1usize..9) {
            let src = shape(2, 3, 4);
            let v = Volume::labels(src, [1.0; 3], vals.clone()).unwrap();
            let out = resize_volume(&v, shape(s0, s1, s2), ResizeMode::Nearest).unwrap();
            prop_assert!(out.as_labels().unwrap().iter().all(|x| vals.contains(x)));
        }
    }
}
