//! Dense 3D scalar volumes and voxel label maps.
//!
//! Axis order is `(z, y, x)` everywhere, matching raster scan order: `z`
//! slowest, `x` fastest. Spacing is in millimetres per voxel along the same
//! axes, so anisotropic grids (coarse `z`, fine in-plane) are first-class.

use ndarray::{Array3, Array4, ArrayView3, Axis, Slice};

use crate::error::{Error, Result};
use crate::taxonomy::{LabelSpace, Taxonomy};

/// Minimum extent per axis for a valid volume.
pub const MIN_DIM: usize = 8;

/// Voxel dimensions `(z, y, x)`.
pub type Dims = [usize; 3];

/// Millimetre spacing per axis `(z, y, x)`.
pub type Spacing = [f64; 3];

/// Validate dims/spacing invariants shared by volumes and label maps.
fn check_geometry(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.iter().any(|&d| d < MIN_DIM) {
        return Err(Error::Data(format!(
            "volume dims {dims:?} below the minimum of {MIN_DIM} per axis"
        )));
    }
    if spacing.iter().any(|&s| !s.is_finite() || s <= 0.0) {
        return Err(Error::Data(format!("spacing {spacing:?} must be finite and positive")));
    }
    Ok(())
}

/// A scalar intensity volume (f32) with voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    spacing: Spacing,
    voxels: Array3<f32>,
}

impl Volume {
    /// Build a volume, validating dims, spacing and finiteness of every
    /// intensity.
    pub fn new(voxels: Array3<f32>, spacing: Spacing) -> Result<Self> {
        let dims = [voxels.shape()[0], voxels.shape()[1], voxels.shape()[2]];
        check_geometry(dims, spacing)?;
        if let Some(bad) = voxels.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("volume contains non-finite intensity {bad}")));
        }
        Ok(Volume { spacing, voxels })
    }

    pub fn dims(&self) -> Dims {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn voxels(&self) -> &Array3<f32> {
        &self.voxels
    }

    /// Physical volume of one voxel in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }
}

/// A voxel-wise class label map (u8) with voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    spacing: Spacing,
    labels: Array3<u8>,
}

impl LabelMap {
    pub fn new(labels: Array3<u8>, spacing: Spacing) -> Result<Self> {
        let dims = [labels.shape()[0], labels.shape()[1], labels.shape()[2]];
        check_geometry(dims, spacing)?;
        Ok(LabelMap { spacing, labels })
    }

    pub fn dims(&self) -> Dims {
        let s = self.labels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Check every label id is valid for `space` under `taxonomy`.
    pub fn validate_ids(&self, taxonomy: &Taxonomy, space: LabelSpace) -> Result<()> {
        let n = taxonomy.class_count(space) as u8;
        if let Some(&bad) = self.labels.iter().find(|&&v| v >= n) {
            return Err(Error::Data(format!(
                "label id {bad} out of range for {space} space ({n} classes)"
            )));
        }
        Ok(())
    }

    /// Remap a diagnosis-space map down to the detection space.
    pub fn merge_to_detection(&self, taxonomy: &Taxonomy) -> Result<LabelMap> {
        self.validate_ids(taxonomy, LabelSpace::Diagnosis)?;
        let table = taxonomy.merge_table();
        let labels = self.labels.mapv(|v| table[v as usize]);
        Ok(LabelMap { spacing: self.spacing, labels })
    }
}

/// Which axes to reverse; `[z, y, x]`.
pub type FlipMask = [bool; 3];

/// All eight axis-flip combinations, identity first, in binary counting
/// order over `(z, y, x)` bits.
pub fn all_flips() -> [FlipMask; 8] {
    let mut out = [[false; 3]; 8];
    for (i, f) in out.iter_mut().enumerate() {
        *f = [(i & 4) != 0, (i & 2) != 0, (i & 1) != 0];
    }
    out
}

/// Reverse the chosen axes of a 3D array.
pub fn flip3<T: Clone>(a: &ArrayView3<'_, T>, flips: FlipMask) -> Array3<T> {
    let mut view = a.view();
    for (axis, &f) in flips.iter().enumerate() {
        if f {
            view.slice_axis_inplace(Axis(axis), Slice::new(0, None, -1));
        }
    }
    view.to_owned()
}

/// Reverse the chosen spatial axes of a `(class, z, y, x)` array.
pub fn flip4_spatial(a: &Array4<f64>, flips: FlipMask) -> Array4<f64> {
    let mut view = a.view();
    for (axis, &f) in flips.iter().enumerate() {
        if f {
            view.slice_axis_inplace(Axis(axis + 1), Slice::new(0, None, -1));
        }
    }
    view.to_owned()
}

/// Per-voxel argmax over the class axis of a `(class, z, y, x)` probability
/// array. Ties resolve to the lowest class id.
pub fn argmax_labels(p: &Array4<f64>) -> Array3<u8> {
    let (c, d, h, w) = p.dim();
    debug_assert!(c <= u8::MAX as usize + 1);
    let mut out = Array3::zeros((d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = p[[0, z, y, x]];
                for ci in 1..c {
                    let v = p[[ci, z, y, x]];
                    if v > best_v {
                        best_v = v;
                        best = ci;
                    }
                }
                out[[z, y, x]] = best as u8;
            }
        }
    }
    out
}

/// Mirror an out-of-range index back into `[0, n)` without repeating edge
/// samples (reflection about the boundary voxels).
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Reflect-pad a 3D array so each axis reaches at least `target` extent.
///
/// Returns the padded array and the offset of the original origin inside
/// it. Errors if any axis would need more padding than single reflection
/// can provide (pad per side must stay below the axis length).
pub fn pad_to<T: Clone>(a: &ArrayView3<'_, T>, target: Dims) -> Result<(Array3<T>, Dims)> {
    let src = [a.shape()[0], a.shape()[1], a.shape()[2]];
    let mut lo = [0usize; 3];
    let mut out_dims = src;
    for ax in 0..3 {
        if target[ax] > src[ax] {
            let pad = target[ax] - src[ax];
            lo[ax] = pad / 2;
            let hi = pad - lo[ax];
            if lo[ax].max(hi) > src[ax] - 1 {
                return Err(Error::Data(format!(
                    "window of {} exceeds what reflection padding can produce from axis length {}",
                    target[ax], src[ax]
                )));
            }
            out_dims[ax] = target[ax];
        }
    }
    let mut out = Array3::from_elem(out_dims, a[[0, 0, 0]].clone());
    for z in 0..out_dims[0] {
        let sz = reflect_index(z as isize - lo[0] as isize, src[0]);
        for y in 0..out_dims[1] {
            let sy = reflect_index(y as isize - lo[1] as isize, src[1]);
            for x in 0..out_dims[2] {
                let sx = reflect_index(x as isize - lo[2] as isize, src[2]);
                out[[z, y, x]] = a[[sz, sy, sx]].clone();
            }
        }
    }
    Ok((out, lo))
}
