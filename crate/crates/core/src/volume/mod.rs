//! Volume and label data model shared by every pipeline stage.
//!
//! Voxel data is stored slice-major, row-major: index `(s, r, c)` lives at
//! `(s * rows + r) * cols + c`. Hard masks always use label value 1 for
//! foreground; the 255 convention of display images never reaches this layer.

mod components;
mod io;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use components::{connected_components, Components, Connectivity};
pub use io::{load_boxes, load_volume, save_boxes, save_volume};
pub(crate) use io::write_json;

/// Extent of a volume as (slices, rows, cols).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 3]", into = "[usize; 3]")]
pub struct VolumeShape {
    pub slices: usize,
    pub rows: usize,
    pub cols: usize,
}

impl VolumeShape {
    pub fn new(slices: usize, rows: usize, cols: usize) -> Result<Self> {
        if slices == 0 || rows == 0 || cols == 0 {
            return Err(Error::invalid(
                "shape",
                format!("all dimensions must be >= 1, got [{slices}, {rows}, {cols}]"),
            ));
        }
        slices
            .checked_mul(rows)
            .and_then(|n| n.checked_mul(cols))
            .filter(|&n| n <= isize::MAX as usize / 8)
            .ok_or_else(|| Error::invalid("shape", "voxel count overflows addressable memory"))?;
        Ok(Self { slices, rows, cols })
    }

    pub fn len(&self) -> usize {
        self.slices * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn index(&self, slice: usize, row: usize, col: usize) -> usize {
        (slice * self.rows + row) * self.cols + col
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.slices, self.rows, self.cols]
    }
}

impl TryFrom<[usize; 3]> for VolumeShape {
    type Error = Error;

    fn try_from(v: [usize; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<VolumeShape> for [usize; 3] {
    fn from(s: VolumeShape) -> Self {
        s.as_array()
    }
}

impl fmt::Display for VolumeShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.slices, self.rows, self.cols)
    }
}

/// Scalar type and meaning of the voxels in a [`Volume`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dtype {
    Int16Hu,
    Float32Normalized,
    Uint8Label,
    Float32Soft,
}

impl Dtype {
    pub fn as_str(&self) -> &'static str {
        match self {
            Dtype::Int16Hu => "int16-HU",
            Dtype::Float32Normalized => "float32-normalized",
            Dtype::Uint8Label => "uint8-label",
            Dtype::Float32Soft => "float32-soft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "int16-HU" => Ok(Dtype::Int16Hu),
            "float32-normalized" => Ok(Dtype::Float32Normalized),
            "uint8-label" => Ok(Dtype::Uint8Label),
            "float32-soft" => Ok(Dtype::Float32Soft),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }

    pub fn byte_width(&self) -> usize {
        match self {
            Dtype::Int16Hu => 2,
            Dtype::Float32Normalized | Dtype::Float32Soft => 4,
            Dtype::Uint8Label => 1,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    Hu(Vec<i16>),
    Normalized(Vec<f32>),
    Label(Vec<u8>),
    Soft(Vec<f32>),
}

impl VolumeData {
    pub fn dtype(&self) -> Dtype {
        match self {
            VolumeData::Hu(_) => Dtype::Int16Hu,
            VolumeData::Normalized(_) => Dtype::Float32Normalized,
            VolumeData::Label(_) => Dtype::Uint8Label,
            VolumeData::Soft(_) => Dtype::Float32Soft,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VolumeData::Hu(v) => v.len(),
            VolumeData::Normalized(v) | VolumeData::Soft(v) => v.len(),
            VolumeData::Label(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A 3D scalar grid with spacing metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: VolumeShape,
    spacing_mm: [f64; 3],
    data: VolumeData,
}

impl Volume {
    /// Validates every dtype invariant. Labels of 255 are folded to 1.
    pub fn new(shape: VolumeShape, spacing_mm: [f64; 3], data: VolumeData) -> Result<Self> {
        check_spacing(spacing_mm)?;
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch { expected: shape.len(), found: data.len() });
        }
        let data = match data {
            VolumeData::Normalized(v) => {
                check_unit_range("float32-normalized", &v)?;
                VolumeData::Normalized(v)
            }
            VolumeData::Soft(v) => {
                check_unit_range("float32-soft", &v)?;
                VolumeData::Soft(v)
            }
            VolumeData::Label(mut v) => {
                for x in v.iter_mut() {
                    match *x {
                        0 | 1 => {}
                        255 => *x = 1,
                        other => {
                            return Err(Error::invalid(
                                "data",
                                format!("label value {other} is not in {{0, 1}}"),
                            ))
                        }
                    }
                }
                VolumeData::Label(v)
            }
            hu @ VolumeData::Hu(_) => hu,
        };
        Ok(Self { shape, spacing_mm, data })
    }

    pub fn hu(shape: VolumeShape, spacing_mm: [f64; 3], data: Vec<i16>) -> Result<Self> {
        Self::new(shape, spacing_mm, VolumeData::Hu(data))
    }

    pub fn normalized(shape: VolumeShape, spacing_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(shape, spacing_mm, VolumeData::Normalized(data))
    }

    pub fn labels(shape: VolumeShape, spacing_mm: [f64; 3], data: Vec<u8>) -> Result<Self> {
        Self::new(shape, spacing_mm, VolumeData::Label(data))
    }

    pub fn soft(shape: VolumeShape, spacing_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(shape, spacing_mm, VolumeData::Soft(data))
    }

    pub fn shape(&self) -> VolumeShape {
        self.shape
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    pub fn into_data(self) -> VolumeData {
        self.data
    }

    pub fn with_spacing(mut self, spacing_mm: [f64; 3]) -> Result<Self> {
        check_spacing(spacing_mm)?;
        self.spacing_mm = spacing_mm;
        Ok(self)
    }

    pub fn as_hu(&self) -> Result<&[i16]> {
        match &self.data {
            VolumeData::Hu(v) => Ok(v),
            other => Err(wrong("int16-HU", other.dtype())),
        }
    }

    pub fn as_labels(&self) -> Result<&[u8]> {
        match &self.data {
            VolumeData::Label(v) => Ok(v),
            other => Err(wrong("uint8-label", other.dtype())),
        }
    }

    /// Voxels of either float dtype.
    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            VolumeData::Normalized(v) | VolumeData::Soft(v) => Ok(v),
            other => Err(wrong("float32", other.dtype())),
        }
    }

    pub fn as_normalized(&self) -> Result<&[f32]> {
        match &self.data {
            VolumeData::Normalized(v) => Ok(v),
            other => Err(wrong("float32-normalized", other.dtype())),
        }
    }

    /// Every voxel widened to f64, whatever the dtype.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            VolumeData::Hu(v) => v.iter().map(|&x| x as f64).collect(),
            VolumeData::Normalized(v) | VolumeData::Soft(v) => v.iter().map(|&x| x as f64).collect(),
            VolumeData::Label(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// Copies out one slice as a 2D grid of f32 values.
    pub fn slice_f32(&self, slice: usize) -> Result<Grid2<f32>> {
        let n = self.shape.slice_len();
        let range = slice * n..(slice + 1) * n;
        let data = self.as_f32()?[range].to_vec();
        Ok(Grid2::from_vec(self.shape.rows, self.shape.cols, data))
    }

    pub fn slice_labels(&self, slice: usize) -> Result<Grid2<u8>> {
        let n = self.shape.slice_len();
        let range = slice * n..(slice + 1) * n;
        let data = self.as_labels()?[range].to_vec();
        Ok(Grid2::from_vec(self.shape.rows, self.shape.cols, data))
    }
}

fn wrong(expected: &'static str, found: Dtype) -> Error {
    Error::WrongDtype { expected, found: found.as_str() }
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::invalid("spacing_mm", format!("must be positive, got {spacing:?}")))
    }
}

fn check_unit_range(what: &'static str, v: &[f32]) -> Result<()> {
    match v.iter().position(|x| !(0.0..=1.0).contains(x)) {
        None => Ok(()),
        Some(i) => Err(Error::invalid(
            "data",
            format!("{what} value {} at index {i} is outside [0, 1]", v[i]),
        )),
    }
}

/// Soft labels in [0, 1]: pseudo masks and ensembled training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelVolume {
    shape: VolumeShape,
    data: Vec<f32>,
}

impl SoftLabelVolume {
    pub fn new(shape: VolumeShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch { expected: shape.len(), found: data.len() });
        }
        check_unit_range("soft label", &data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: VolumeShape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn shape(&self) -> VolumeShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn from_volume(vol: &Volume) -> Result<Self> {
        Self::new(vol.shape(), vol.as_f32()?.to_vec())
    }

    pub fn to_volume(&self, spacing_mm: [f64; 3]) -> Result<Volume> {
        Volume::soft(self.shape, spacing_mm, self.data.clone())
    }

    /// Hard labels promoted to {0, 1} soft labels.
    pub fn from_labels(vol: &Volume) -> Result<Self> {
        let data = vol.as_labels()?.iter().map(|&x| x as f32).collect();
        Self::new(vol.shape(), data)
    }
}

/// Hard-thresholds soft labels: a voxel becomes 1 iff it is strictly greater
/// than `threshold`. Voxels sitting exactly at the threshold stay background.
pub fn binarize(vol: &SoftLabelVolume, threshold: f64) -> Result<Volume> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold", format!("must lie in (0, 1), got {threshold}")));
    }
    let data = vol.data().iter().map(|&v| u8::from(v as f64 > threshold)).collect();
    Volume::labels(vol.shape(), [1.0; 3], data)
}

/// Row-major 2D grid used for per-slice processing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid2<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }
}

impl<T> Grid2<T> {
    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "grid data length does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn same_dims<U>(&self, other: &Grid2<U>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid2<U> {
        Grid2 { rows: self.rows, cols: self.cols, data: self.data.iter().map(f).collect() }
    }
}

/// Axis-aligned box on one slice; all bounds are inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SliceBox {
    pub slice_index: usize,
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl SliceBox {
    #[inline]
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }

    pub fn intersects(&self, other: &SliceBox) -> bool {
        self.row_min <= other.row_max
            && other.row_min <= self.row_max
            && self.col_min <= other.col_max
            && other.col_min <= self.col_max
    }

    pub fn area(&self) -> usize {
        (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
    }

    fn validate(&self, shape: &VolumeShape) -> Result<()> {
        let ok = self.slice_index < shape.slices
            && self.row_min <= self.row_max
            && self.row_max < shape.rows
            && self.col_min <= self.col_max
            && self.col_max < shape.cols;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("boxes", format!("box {self:?} is invalid for shape {shape}")))
        }
    }
}

/// Per-slice bounding boxes: at most two disjoint boxes per slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceBoxSet {
    shape: VolumeShape,
    boxes: BTreeMap<usize, Vec<SliceBox>>,
}

impl SliceBoxSet {
    pub fn new(shape: VolumeShape, boxes: BTreeMap<usize, Vec<SliceBox>>) -> Result<Self> {
        for (&slice, list) in &boxes {
            if list.len() > 2 {
                return Err(Error::invalid(
                    "boxes",
                    format!("slice {slice} has {} boxes, at most 2 allowed", list.len()),
                ));
            }
            for b in list {
                if b.slice_index != slice {
                    return Err(Error::invalid(
                        "boxes",
                        format!("box slice_index {} filed under slice {slice}", b.slice_index),
                    ));
                }
                b.validate(&shape)?;
            }
            if list.len() == 2 && list[0].intersects(&list[1]) {
                return Err(Error::invalid("boxes", format!("boxes on slice {slice} overlap")));
            }
        }
        let boxes = boxes.into_iter().filter(|(_, v)| !v.is_empty()).collect();
        Ok(Self { shape, boxes })
    }

    pub fn empty(shape: VolumeShape) -> Self {
        Self { shape, boxes: BTreeMap::new() }
    }

    pub fn shape(&self) -> VolumeShape {
        self.shape
    }

    /// Boxes on `slice`; empty when the slice carries no annotation.
    pub fn slice(&self, slice: usize) -> &[SliceBox] {
        self.boxes.get(&slice).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[SliceBox])> {
        self.boxes.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn box_count(&self) -> usize {
        self.boxes.values().map(Vec::len).sum()
    }

    /// Rasterizes the box union as a hard mask.
    pub fn to_mask(&self) -> Result<Volume> {
        let mut data = vec![0u8; self.shape.len()];
        for (slice, list) in self.iter() {
            for b in list {
                for r in b.row_min..=b.row_max {
                    let start = self.shape.index(slice, r, b.col_min);
                    data[start..=start + (b.col_max - b.col_min)].fill(1);
                }
            }
        }
        Volume::labels(self.shape, [1.0; 3], data)
    }
}
