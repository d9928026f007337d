//! Pseudo-mask generation from bounding boxes.
//!
//! For every annotated slice and every box on it, the slice is zeroed outside
//! the box and clustered by intensity. The second-largest cluster (areas are
//! counted over the whole slice, so the zero-filled exterior dominates the
//! largest one) is taken as foreground inside the box, then cleaned by
//! closing, hole filling and small-component removal. This runs once per
//! cluster count and the two hard masks are fused into {0, 0.5, 1}.

pub mod kmeans;
pub mod morphology;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid2, SliceBox, SliceBoxSet, SoftLabelVolume, Volume};

pub use kmeans::{kmeans_slice, KMeansResult};
pub use morphology::{fill_holes, morphological_closing, remove_small_components};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoMaskParams {
    pub ks: [usize; 2],
    pub hole_area_max: usize,
    pub fg_component_min_frac: f64,
    pub closing_radius: usize,
    pub kmeans_restarts: usize,
    pub kmeans_max_iters: usize,
    pub seed: u64,
}

impl Default for PseudoMaskParams {
    fn default() -> Self {
        Self {
            ks: [2, 3],
            hole_area_max: 10,
            fg_component_min_frac: 0.01,
            closing_radius: 1,
            kmeans_restarts: 5,
            kmeans_max_iters: 100,
            seed: 0,
        }
    }
}

impl PseudoMaskParams {
    pub fn validate(&self) -> Result<()> {
        if self.ks.iter().any(|&k| k < 2) || self.ks[0] == self.ks[1] {
            return Err(Error::invalid("ks", format!("need two distinct values >= 2, got {:?}", self.ks)));
        }
        if !(0.0..1.0).contains(&self.fg_component_min_frac) {
            return Err(Error::invalid(
                "fg_component_min_frac",
                format!("must lie in [0, 1), got {}", self.fg_component_min_frac),
            ));
        }
        if self.kmeans_restarts == 0 {
            return Err(Error::invalid("kmeans_restarts", "need at least one restart"));
        }
        Ok(())
    }
}

/// One line of the per-slice stage report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub slice: usize,
    pub k: usize,
    pub cluster_sizes: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Zeroes every pixel outside the union of `boxes`.
pub fn mask_outside_boxes(slice: &Grid2<f32>, boxes: &[SliceBox]) -> Grid2<f32> {
    let mut out = slice.clone();
    let cols = slice.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (r, c) = (i / cols, i % cols);
        if !boxes.iter().any(|b| b.contains(r, c)) {
            *v = 0.0;
        }
    }
    out
}

/// Foreground = the cluster with the second-largest pixel count (ties go to
/// the brighter centroid), restricted to the box union.
pub fn select_foreground(result: &KMeansResult, boxes: &[SliceBox]) -> Grid2<u8> {
    let sizes = result.cluster_sizes();
    let mut order: Vec<usize> = (0..result.k).collect();
    order.sort_by(|&a, &b| {
        sizes[b].cmp(&sizes[a]).then(result.centroids[b].total_cmp(&result.centroids[a]))
    });
    let chosen = order[1];
    let cols = result.assignments.cols();
    let data = result
        .assignments
        .data()
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let (r, c) = (i / cols, i % cols);
            u8::from(a == chosen && boxes.iter().any(|b| b.contains(r, c)))
        })
        .collect();
    Grid2::from_vec(result.assignments.rows(), cols, data)
}

/// Both foreground -> 1, both background -> 0, disagreement -> 0.5.
pub fn fuse_masks(a: &Grid2<u8>, b: &Grid2<u8>) -> Result<Grid2<f32>> {
    if !a.same_dims(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match (x != 0, y != 0) {
            (true, true) => 1.0,
            (false, false) => 0.0,
            _ => 0.5,
        })
        .collect();
    Ok(Grid2::from_vec(a.rows(), a.cols(), data))
}

/// The hard mask for one box and one cluster count.
pub fn hard_mask_for_box(
    slice: &Grid2<f32>,
    bx: &SliceBox,
    k: usize,
    params: &PseudoMaskParams,
    seed: u64,
) -> Result<(Grid2<u8>, KMeansResult)> {
    let boxes = std::slice::from_ref(bx);
    let masked = mask_outside_boxes(slice, boxes);
    let km = kmeans_slice(&masked, k, params.kmeans_restarts, params.kmeans_max_iters, seed)?;
    let fg = select_foreground(&km, boxes);
    let fg = morphological_closing(&fg, params.closing_radius);
    let fg = fill_holes(&fg, params.hole_area_max);
    let mut fg = remove_small_components(&fg, params.fg_component_min_frac);
    // Closing and hole filling may reach past the box at the image border.
    let cols = fg.cols();
    for (i, v) in fg.data_mut().iter_mut().enumerate() {
        if !bx.contains(i / cols, i % cols) {
            *v = 0;
        }
    }
    Ok((fg, km))
}

/// Runs the stage chain on one slice. Each box is processed on its own and
/// the per-box trinary masks are merged with a voxelwise max.
///
/// A cluster count that the box cannot support (fewer distinct intensities
/// than k) is skipped with a warning and the other count's mask is used
/// alone; if neither works the slice stays empty.
pub fn pseudo_mask_slice(
    slice_index: usize,
    slice: &Grid2<f32>,
    boxes: &[SliceBox],
    params: &PseudoMaskParams,
) -> Result<(Grid2<f32>, Vec<StageRecord>)> {
    let seed = params.seed ^ slice_index as u64;
    let mut out = Grid2::filled(slice.rows(), slice.cols(), 0.0f32);
    let mut report = Vec::new();
    for bx in boxes {
        let mut masks = Vec::with_capacity(2);
        for &k in &params.ks {
            match hard_mask_for_box(slice, bx, k, params, seed) {
                Ok((mask, km)) => {
                    report.push(StageRecord {
                        slice: slice_index,
                        k,
                        cluster_sizes: km.cluster_sizes(),
                        warnings: vec![],
                    });
                    masks.push(mask);
                }
                Err(Error::TooFewDistinctValues { distinct, k }) => {
                    let msg = format!("box has {distinct} distinct intensities, k = {k} skipped");
                    warn!("slice {slice_index}: {msg}");
                    report.push(StageRecord {
                        slice: slice_index,
                        k,
                        cluster_sizes: vec![],
                        warnings: vec![msg],
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let fused = match masks.as_slice() {
            [a, b] => fuse_masks(a, b)?,
            [a] => a.map(|&v| v as f32),
            _ => continue,
        };
        for (o, &f) in out.data_mut().iter_mut().zip(fused.data()) {
            *o = o.max(f);
        }
    }
    Ok((out, report))
}

/// Builds the pseudo-mask volume for a normalized image and its boxes.
pub fn generate_pseudo_mask(
    vol: &Volume,
    boxes: &SliceBoxSet,
    params: &PseudoMaskParams,
) -> Result<SoftLabelVolume> {
    generate_pseudo_mask_with_report(vol, boxes, params).map(|(mask, _)| mask)
}

pub fn generate_pseudo_mask_with_report(
    vol: &Volume,
    boxes: &SliceBoxSet,
    params: &PseudoMaskParams,
) -> Result<(SoftLabelVolume, Vec<StageRecord>)> {
    params.validate()?;
    vol.as_normalized()?;
    let shape = vol.shape();
    if boxes.shape() != shape {
        return Err(Error::ShapeMismatch(format!("boxes {} vs volume {}", boxes.shape(), shape)));
    }
    let per_slice: Vec<(Vec<f32>, Vec<StageRecord>)> = (0..shape.slices)
        .into_par_iter()
        .map(|s| {
            let list = boxes.slice(s);
            if list.is_empty() {
                return Ok((vec![0.0; shape.slice_len()], vec![]));
            }
            let (mask, report) = pseudo_mask_slice(s, &vol.slice_f32(s)?, list, params)?;
            Ok((mask.into_vec(), report))
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(shape.len());
    let mut report = Vec::new();
    for (mask, rec) in per_slice {
        data.extend(mask);
        report.extend(rec);
    }
    Ok((SoftLabelVolume::new(shape, data)?, report))
}
