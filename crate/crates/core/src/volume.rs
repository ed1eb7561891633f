//! Geometry-aware voxel grids: intensity volumes, label maps and subject records.
//!
//! Voxel data is stored with axis 0 varying fastest, matching the on-disk
//! NIfTI layout, so `linear = i + nx * (j + ny * k)`.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::xform::AffineTransform;

/// Smallest |det| of the 3x3 block accepted for an index-to-world affine.
pub const MIN_AFFINE_DET: f64 = 1e-12;

/// Largest valid label code.
pub const MAX_LABEL: u8 = 6;

/// The six segmented nuclei and their fixed label codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Structure {
    #[serde(rename = "RN_r")]
    RnR = 1,
    #[serde(rename = "SN_r")]
    SnR = 2,
    #[serde(rename = "STN_r")]
    StnR = 3,
    #[serde(rename = "RN_l")]
    RnL = 4,
    #[serde(rename = "SN_l")]
    SnL = 5,
    #[serde(rename = "STN_l")]
    StnL = 6,
}

impl Structure {
    pub const ALL: [Structure; 6] = [
        Structure::RnR,
        Structure::SnR,
        Structure::StnR,
        Structure::RnL,
        Structure::SnL,
        Structure::StnL,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Structure::RnR => "RN_r",
            Structure::SnR => "SN_r",
            Structure::StnR => "STN_r",
            Structure::RnL => "RN_l",
            Structure::SnL => "SN_l",
            Structure::StnL => "STN_l",
        }
    }

    pub fn from_code(code: u8) -> Option<Structure> {
        Structure::ALL.get((code as usize).wrapping_sub(1)).copied()
    }

    pub fn from_name(name: &str) -> Option<Structure> {
        Structure::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn is_stn(self) -> bool {
        matches!(self, Structure::StnR | Structure::StnL)
    }
}

impl std::fmt::Display for Structure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Voxel grid layout: dimensions, spacing and the index-to-world affine (mm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryRecord", into = "GeometryRecord")]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    index_to_world: Matrix4<f64>,
    world_to_index: Matrix4<f64>,
}

#[derive(Serialize, Deserialize)]
struct GeometryRecord {
    dims: [usize; 3],
    spacing: [f64; 3],
    /// Row-major 4x4.
    index_to_world: Vec<f64>,
}

impl TryFrom<GeometryRecord> for Geometry {
    type Error = Error;

    fn try_from(r: GeometryRecord) -> Result<Self> {
        if r.index_to_world.len() != 16 {
            return Err(Error::Validation(format!(
                "index_to_world needs 16 entries, got {}",
                r.index_to_world.len()
            )));
        }
        Geometry::new(r.dims, r.spacing, Matrix4::from_row_slice(&r.index_to_world))
    }
}

impl From<Geometry> for GeometryRecord {
    fn from(g: Geometry) -> Self {
        let m = g.index_to_world;
        GeometryRecord {
            dims: g.dims,
            spacing: g.spacing,
            index_to_world: (0..4).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect(),
        }
    }
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], index_to_world: Matrix4<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Validation(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::Validation(format!("spacing must be positive, got {spacing:?}")));
        }
        if index_to_world.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("index_to_world has non-finite entries".into()));
        }
        let bottom = index_to_world.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Err(Error::Validation("index_to_world last row must be (0,0,0,1)".into()));
        }
        let det = index_to_world.fixed_view::<3, 3>(0, 0).determinant();
        if det.abs() <= MIN_AFFINE_DET {
            return Err(Error::DegenerateTransform { det });
        }
        let world_to_index = index_to_world
            .try_inverse()
            .ok_or(Error::DegenerateTransform { det })?;
        Ok(Geometry {
            dims,
            spacing,
            index_to_world,
            world_to_index,
        })
    }

    /// Axis-aligned grid whose center sits at world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let mut m = Matrix4::identity();
        for a in 0..3 {
            m[(a, a)] = spacing[a];
            m[(a, 3)] = -(dims[a] as f64 - 1.0) * 0.5 * spacing[a];
        }
        Geometry::new(dims, spacing, m)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn index_to_world(&self) -> &Matrix4<f64> {
        &self.index_to_world
    }

    pub fn world_to_index(&self) -> &Matrix4<f64> {
        &self.world_to_index
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    #[inline]
    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn contains_index(&self, idx: [i64; 3]) -> bool {
        (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < self.dims[a])
    }

    pub fn index_to_world_point(&self, p: [f64; 3]) -> [f64; 3] {
        apply_h(&self.index_to_world, p)
    }

    pub fn world_to_index_point(&self, p: [f64; 3]) -> [f64; 3] {
        apply_h(&self.world_to_index, p)
    }

    /// World position of the continuous grid center.
    pub fn center_world(&self) -> [f64; 3] {
        self.index_to_world_point([
            (self.dims[0] as f64 - 1.0) * 0.5,
            (self.dims[1] as f64 - 1.0) * 0.5,
            (self.dims[2] as f64 - 1.0) * 0.5,
        ])
    }

    /// Geometry of a window whose voxel 0 sits at `start` in this grid.
    pub fn window(&self, start: [i64; 3], dims: [usize; 3]) -> Result<Geometry> {
        let mut shift = Matrix4::identity();
        for a in 0..3 {
            shift[(a, 3)] = start[a] as f64;
        }
        Geometry::new(dims, self.spacing, self.index_to_world * shift)
    }

    /// Geometry of the grid resampled at every `factor`-th voxel.
    pub fn decimated(&self, factor: usize) -> Result<Geometry> {
        let f = factor as f64;
        let dims = self.dims.map(|d| d.div_ceil(factor));
        let mut scale = Matrix4::identity();
        for a in 0..3 {
            scale[(a, a)] = f;
        }
        Geometry::new(dims, self.spacing.map(|s| s * f), self.index_to_world * scale)
    }

    /// Describes how `other` differs from `self`, or `None` when equal within `tol`.
    pub fn diff(&self, other: &Geometry, tol: f64) -> Option<String> {
        if self.dims != other.dims {
            return Some(format!("dims {:?} != {:?}", self.dims, other.dims));
        }
        let max = (self.index_to_world - other.index_to_world).amax();
        (max > tol).then(|| format!("affine differs by {max:e} (> {tol:e})"))
    }
}

/// True iff dims are equal and the affines agree elementwise within `tol` mm.
pub fn geometry_equal(a: &Geometry, b: &Geometry, tol: f64) -> bool {
    a.diff(b, tol).is_none()
}

#[inline]
pub(crate) fn apply_h(m: &Matrix4<f64>, p: [f64; 3]) -> [f64; 3] {
    let v = m * Vector4::new(p[0], p[1], p[2], 1.0);
    [v[0], v[1], v[2]]
}

/// A voxel grid of values laid out on a [`Geometry`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    geometry: Geometry,
    data: Vec<T>,
}

/// Scalar intensity image (T1w, T2w, ...).
pub type Volume = Grid<f32>;

/// Integer label map with codes 0 (background) and 1-6.
pub type LabelMap = Grid<u8>;

impl<T: Copy + Default> Grid<T> {
    /// Grid filled with the default value (0).
    pub fn filled(geometry: Geometry, value: T) -> Self {
        let data = vec![value; geometry.len()];
        Grid { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.geometry.linear(i, j, k)]
    }

    /// Value at a signed index, or `None` outside the grid.
    pub fn get_checked(&self, idx: [i64; 3]) -> Option<T> {
        self.geometry
            .contains_index(idx)
            .then(|| self.get(idx[0] as usize, idx[1] as usize, idx[2] as usize))
    }

    /// Same data on a different geometry with identical dims.
    pub fn with_geometry(self, geometry: Geometry) -> Result<Self> {
        if geometry.dims != self.geometry.dims {
            return Err(Error::GeometryMismatch(format!(
                "cannot relabel dims {:?} as {:?}",
                self.geometry.dims, geometry.dims
            )));
        }
        Ok(Grid {
            geometry,
            data: self.data,
        })
    }

    pub(crate) fn from_parts_unchecked(geometry: Geometry, data: Vec<T>) -> Self {
        debug_assert_eq!(geometry.len(), data.len());
        Grid { geometry, data }
    }

    pub(crate) fn require_same_grid<U: Copy + Default>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        match self.geometry.diff(&other.geometry, 1e-6) {
            None => Ok(()),
            Some(d) => Err(Error::GeometryMismatch(format!("{what}: {d}"))),
        }
    }
}

fn check_len(geometry: &Geometry, n: usize) -> Result<()> {
    if geometry.len() != n {
        return Err(Error::Validation(format!(
            "data length {n} does not match grid {:?} ({} voxels)",
            geometry.dims,
            geometry.len()
        )));
    }
    Ok(())
}

impl Grid<f32> {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        check_len(&geometry, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite intensity at voxel {:?}",
                geometry.unravel(pos)
            )));
        }
        Ok(Grid { geometry, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self::filled(geometry, 0.0)
    }

    /// Builds a volume by evaluating `f` at every voxel index.
    pub fn from_fn(geometry: Geometry, mut f: impl FnMut([usize; 3]) -> f32) -> Result<Self> {
        let data = (0..geometry.len()).map(|n| f(geometry.unravel(n))).collect();
        Self::new(geometry, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.geometry.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

impl Grid<u8> {
    pub fn new(geometry: Geometry, data: Vec<u8>) -> Result<Self> {
        check_len(&geometry, data.len())?;
        if let Some(pos) = data.iter().position(|&v| v > MAX_LABEL) {
            return Err(Error::Validation(format!(
                "label code {} at voxel {:?} is outside 0..={MAX_LABEL}",
                data[pos],
                geometry.unravel(pos)
            )));
        }
        Ok(Grid { geometry, data })
    }

    pub fn empty(geometry: Geometry) -> Self {
        Self::filled(geometry, 0)
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut([usize; 3]) -> u8) -> Result<Self> {
        let data = (0..geometry.len()).map(|n| f(geometry.unravel(n))).collect();
        Self::new(geometry, data)
    }

    pub fn count(&self, code: u8) -> usize {
        self.data.iter().filter(|&&v| v == code).count()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Codes present, ascending, excluding background.
    pub fn codes(&self) -> Vec<u8> {
        let mut seen = [false; MAX_LABEL as usize + 1];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=MAX_LABEL).filter(|&c| seen[c as usize]).collect()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    /// All nonzero codes collapsed to 1.
    pub fn binarized(&self) -> LabelMap {
        Grid {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|&v| (v != 0) as u8).collect(),
        }
    }

    /// Inclusive index bounding box of the voxels matching `pred`.
    pub fn bounding_box(&self, pred: impl Fn(u8) -> bool) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (n, &v) in self.data.iter().enumerate() {
            if pred(v) {
                any = true;
                let idx = self.geometry.unravel(n);
                for a in 0..3 {
                    lo[a] = lo[a].min(idx[a]);
                    hi[a] = hi[a].max(idx[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }
}

/// One applied geometric transform, in application order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformEntry {
    pub stage: String,
    pub transform: AffineTransform,
}

/// Subject inputs as acquired: T2 may still be split into echoes.
#[derive(Clone, Debug)]
pub struct RawSubject {
    pub id: String,
    pub dataset: String,
    pub t1: Volume,
    pub t2_echoes: Vec<Volume>,
    pub brain_mask: LabelMap,
    pub truth: Option<LabelMap>,
}

/// A subject's images, mask, optional ground truth and transform provenance.
#[derive(Clone, Debug)]
pub struct SubjectRecord {
    pub id: String,
    pub dataset: String,
    pub t1: Volume,
    pub t2: Volume,
    pub brain_mask: LabelMap,
    pub truth: Option<LabelMap>,
    pub transform_log: Vec<TransformEntry>,
}

impl SubjectRecord {
    /// Composition of every logged transform, first entry applied first.
    pub fn cumulative_transform(&self) -> AffineTransform {
        self.transform_log
            .iter()
            .fold(AffineTransform::identity(), |acc, e| e.transform.compose(&acc))
    }

    pub fn geometry(&self) -> &Geometry {
        self.t2.geometry()
    }

    /// Checks that every image shares the T2 grid.
    pub fn validate(&self) -> Result<()> {
        self.t2.require_same_grid(&self.t1, &format!("{} t1 vs t2", self.id))?;
        self.t2
            .require_same_grid(&self.brain_mask, &format!("{} mask vs t2", self.id))?;
        if !self.brain_mask.is_binary() {
            return Err(Error::Validation(format!("{}: brain mask is not binary", self.id)));
        }
        if let Some(truth) = &self.truth {
            self.t2.require_same_grid(truth, &format!("{} truth vs t2", self.id))?;
        }
        Ok(())
    }
}
