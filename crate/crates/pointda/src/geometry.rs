//! Anchor lattice and the bijection between offset outputs and image coordinates.
//!
//! Axis conventions, fixed once for the whole crate:
//! - images are row-major `(channel, y, x)`;
//! - prediction maps are `(i, j, k, c)` where `i` indexes cells along x
//!   (width), `j` along y (height) and `k` is the slot within the cell;
//! - a decoded point is `(x, y)` in image pixels with origin at the top-left.
//!
//! A slot `(i, j, k)` decodes to `x = s * (i + di)`, `y = s * (j + dj)` with
//! offsets `di, dj` in `[-1, 1]`, so a cell can reach one stride beyond its
//! own window in every direction. Decoded points are never clipped to the
//! image.

use ndarray::Array4;

use crate::error::{Error, Result};

/// The W x H x D lattice of proposal slots induced by a stride-s backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorGrid {
    pub feat_w: usize,
    pub feat_h: usize,
    pub slots_per_cell: usize,
    pub stride: usize,
    pub image_w: usize,
    pub image_h: usize,
}

impl AnchorGrid {
    pub fn num_cells(&self) -> usize {
        self.feat_w * self.feat_h
    }

    pub fn num_slots(&self) -> usize {
        self.feat_w * self.feat_h * self.slots_per_cell
    }

    /// Flat slot index in (i, j, k) order: i-major, then j, then k.
    pub fn slot_index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.feat_w && j < self.feat_h && k < self.slots_per_cell);
        (i * self.feat_h + j) * self.slots_per_cell + k
    }

    /// Inverse of [`slot_index`](Self::slot_index).
    pub fn slot_cell(&self, flat: usize) -> (usize, usize, usize) {
        let k = flat % self.slots_per_cell;
        let rest = flat / self.slots_per_cell;
        let j = rest % self.feat_h;
        let i = rest / self.feat_h;
        (i, j, k)
    }

    /// Shape of the offset / classification maps for this grid.
    pub fn map_dim(&self) -> (usize, usize, usize, usize) {
        (self.feat_w, self.feat_h, self.slots_per_cell, 2)
    }
}

pub fn build_anchor_grid(
    image_w: usize,
    image_h: usize,
    stride: usize,
    slots_per_cell: usize,
) -> Result<AnchorGrid> {
    if image_w == 0 || image_h == 0 || stride == 0 || slots_per_cell == 0 {
        return Err(Error::InvalidArgument(format!(
            "anchor grid arguments must be positive, got image {image_w}x{image_h}, \
             stride {stride}, slots_per_cell {slots_per_cell}"
        )));
    }
    Ok(AnchorGrid {
        feat_w: image_w.div_ceil(stride),
        feat_h: image_h.div_ceil(stride),
        slots_per_cell,
        stride,
        image_w,
        image_h,
    })
}

/// Per-slot offset pairs `(di, dj)` of shape `(W, H, D, 2)`, values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct OffsetMap {
    pub values: Array4<f64>,
}

impl OffsetMap {
    /// Validates the `[-1, 1]` range invariant.
    pub fn new(values: Array4<f64>) -> Result<Self> {
        if values.dim().3 != 2 {
            return Err(Error::InvalidArgument(format!(
                "offset map last axis must have size 2, got {}",
                values.dim().3
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "offset map entry {bad} outside [-1, 1]"
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(grid: &AnchorGrid) -> Self {
        Self {
            values: Array4::zeros(grid.map_dim()),
        }
    }
}

/// A list of 2-D points in image pixels, optionally with confidences in [0, 1].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSet {
    pub points: Vec<[f64; 2]>,
    pub confidences: Option<Vec<f64>>,
}

impl PointSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if let Some(p) = points
            .iter()
            .find(|p| !p[0].is_finite() || !p[1].is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "point ({}, {}) is not finite",
                p[0], p[1]
            )));
        }
        Ok(Self {
            points,
            confidences: None,
        })
    }

    pub fn with_confidences(points: Vec<[f64; 2]>, confidences: Vec<f64>) -> Result<Self> {
        let mut set = Self::new(points)?;
        if confidences.len() != set.points.len() {
            return Err(Error::InvalidArgument(format!(
                "{} confidences for {} points",
                confidences.len(),
                set.points.len()
            )));
        }
        if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::InvalidArgument(format!(
                "confidence {c} outside [0, 1]"
            )));
        }
        set.confidences = Some(confidences);
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Decodes every slot's offset pair into image coordinates `(x, y)`.
///
/// Output has the same `(W, H, D, 2)` shape as the offsets; points may land
/// up to one stride outside the image and are not clipped.
pub fn decode_points(offsets: &OffsetMap, grid: &AnchorGrid) -> Result<Array4<f64>> {
    if offsets.values.dim() != grid.map_dim() {
        return Err(Error::InvalidArgument(format!(
            "offset map shape {:?} does not match grid {:?}",
            offsets.values.dim(),
            grid.map_dim()
        )));
    }
    let s = grid.stride as f64;
    let mut out = offsets.values.clone();
    for ((i, j, _k, c), v) in out.indexed_iter_mut() {
        let cell = if c == 0 { i } else { j } as f64;
        *v = s * (cell + *v);
    }
    Ok(out)
}

/// Offsets that decode to `target` from `cell`; the algebraic inverse of
/// [`decode_points`] for a single slot.
pub fn encode_offsets(
    target: [f64; 2],
    cell: (usize, usize),
    grid: &AnchorGrid,
) -> Result<[f64; 2]> {
    let s = grid.stride as f64;
    let (i, j) = cell;
    let di = target[0] / s - i as f64;
    let dj = target[1] / s - j as f64;
    if di.abs() > 1.0 || dj.abs() > 1.0 {
        return Err(Error::OutOfRange {
            x: target[0],
            y: target[1],
            i,
            j,
            stride: grid.stride,
        });
    }
    Ok([di, dj])
}
