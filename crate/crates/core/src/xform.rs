//! Affine transform algebra, image and label resampling, inverse label
//! mapping and Gaussian label smoothing.
//!
//! Transforms map world coordinates (mm) of a moving image to world
//! coordinates of a target. Resampling pulls back: an output voxel at world
//! position `x` takes the moving value at `t⁻¹(x)`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{apply_h, geometry_equal, Geometry, LabelMap, Volume, MIN_AFFINE_DET};

/// Fractional offsets closer than this to a grid node snap onto it, so an
/// identity or integer-shift resampling reproduces voxel values exactly.
const SNAP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
}

#[derive(Serialize, Deserialize)]
struct TransformRecord {
    matrix: Vec<f64>,
    meaning: String,
}

const MEANING: &str = "world_to_world_mm";

impl Serialize for AffineTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TransformRecord {
            matrix: self.row_major().to_vec(),
            meaning: MEANING.to_string(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AffineTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = TransformRecord::deserialize(d)?;
        if r.meaning != MEANING {
            return Err(serde::de::Error::custom(format!(
                "transform meaning `{}`, expected `{MEANING}`",
                r.meaning
            )));
        }
        AffineTransform::from_row_major(&r.matrix).map_err(serde::de::Error::custom)
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            matrix: Matrix4::identity(),
        }
    }

    /// Wraps a homogeneous matrix; the last row must be (0,0,0,1).
    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        let last = [matrix[(3, 0)], matrix[(3, 1)], matrix[(3, 2)], matrix[(3, 3)]];
        if last != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Validation(format!("affine last row must be (0,0,0,1), got {last:?}")));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("affine has non-finite entries".into()));
        }
        Ok(AffineTransform { matrix })
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::Validation(format!("affine needs 16 values, got {}", values.len())));
        }
        Self::from_matrix(Matrix4::from_row_slice(values))
    }

    pub(crate) fn from_linear(linear: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&linear);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        AffineTransform { matrix: m }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self::from_linear(Matrix3::identity(), Vector3::from(t))
    }

    pub fn scaling(s: [f64; 3]) -> Self {
        Self::from_linear(Matrix3::from_diagonal(&Vector3::from(s)), Vector3::zeros())
    }

    /// Rotation Rz·Ry·Rx about the world origin, angles in radians.
    pub fn rotation_rad(angles: [f64; 3]) -> Self {
        Self::from_linear(euler_matrix(angles), Vector3::zeros())
    }

    pub fn rotation_deg(angles: [f64; 3]) -> Self {
        Self::rotation_rad(angles.map(f64::to_radians))
    }

    /// Rotation by `deg` about `axis` through the world origin.
    pub fn rotation_axis_angle(axis: [f64; 3], deg: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(Vector3::from(axis));
        let r = nalgebra::Rotation3::from_axis_angle(&axis, deg.to_radians());
        Self::from_linear(*r.matrix(), Vector3::zeros())
    }

    /// The same map re-anchored so it acts about `center` instead of the origin.
    pub fn about(&self, center: [f64; 3]) -> Self {
        let c = Vector3::from(center);
        Self::translation(center)
            .compose(self)
            .compose(&Self::translation((-c).into()))
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[4 * r + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn linear_part(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_part(&self) -> [f64; 3] {
        [self.matrix[(0, 3)], self.matrix[(1, 3)], self.matrix[(2, 3)]]
    }

    pub fn determinant(&self) -> f64 {
        self.linear_part().determinant()
    }

    /// `self ∘ other`: maps x to self(other(x)).
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        AffineTransform {
            matrix: self.matrix * other.matrix,
        }
    }

    pub fn invert(&self) -> Result<AffineTransform> {
        let det = self.determinant();
        if det.abs() <= MIN_AFFINE_DET || !det.is_finite() {
            return Err(Error::DegenerateTransform { det });
        }
        // Invert the 3x3 block and translation separately; avoids the
        // generic 4x4 path perturbing the exact (0,0,0,1) row.
        let lin_inv = self
            .linear_part()
            .try_inverse()
            .ok_or(Error::DegenerateTransform { det })?;
        let t = Vector3::from(self.translation_part());
        Ok(Self::from_linear(lin_inv, -(lin_inv * t)))
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        apply_h(&self.matrix, p)
    }

    /// Largest elementwise difference to another transform.
    pub fn max_abs_diff(&self, other: &AffineTransform) -> f64 {
        (self.matrix - other.matrix).amax()
    }
}

/// Maps x to a(b(x)).
pub fn compose(a: &AffineTransform, b: &AffineTransform) -> AffineTransform {
    a.compose(b)
}

pub fn invert(t: &AffineTransform) -> Result<AffineTransform> {
    t.invert()
}

/// Composition of a chain applied in order: `chain[0]` first.
pub fn compose_chain(chain: &[AffineTransform]) -> AffineTransform {
    chain
        .iter()
        .fold(AffineTransform::identity(), |acc, t| t.compose(&acc))
}

pub(crate) fn euler_matrix(angles: [f64; 3]) -> Matrix3<f64> {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

/// Index-to-index map taking target voxel indices to moving voxel indices.
fn pullback(moving: &Geometry, t: &AffineTransform, target: &Geometry) -> Result<Matrix4<f64>> {
    let t_inv = t.invert()?;
    Ok(moving.world_to_index() * t_inv.matrix() * target.index_to_world())
}

#[inline]
fn split_coord(x: f64) -> (i64, f64) {
    let f = x.floor();
    let r = x - f;
    if r > 1.0 - SNAP {
        (f as i64 + 1, 0.0)
    } else if r < SNAP {
        (f as i64, 0.0)
    } else {
        (f as i64, r)
    }
}

/// Trilinear sample at a continuous index. Points within half a voxel of the
/// grid edge use edge values; anything further out is `None`.
#[inline]
pub(crate) fn sample_trilinear(data: &[f32], dims: [usize; 3], p: [f64; 3]) -> Option<f64> {
    let mut base = [0usize; 3];
    let mut next = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let x = p[a];
        let n = dims[a] as f64;
        if !(x >= -0.5 && x < n - 0.5) {
            return None;
        }
        let (i0, r) = split_coord(x);
        let lo = i0.clamp(0, dims[a] as i64 - 1) as usize;
        let hi = (i0 + 1).clamp(0, dims[a] as i64 - 1) as usize;
        base[a] = lo;
        next[a] = if r == 0.0 { lo } else { hi };
        frac[a] = if i0 < 0 || lo == hi { 0.0 } else { r };
    }
    let nx = dims[0];
    let nxy = dims[0] * dims[1];
    let at = |i: usize, j: usize, k: usize| data[i + nx * j + nxy * k] as f64;
    let [fx, fy, fz] = frac;
    let [i0, j0, k0] = base;
    let [i1, j1, k1] = next;
    if fx == 0.0 && fy == 0.0 && fz == 0.0 {
        return Some(at(i0, j0, k0));
    }
    let c00 = at(i0, j0, k0) * (1.0 - fx) + at(i1, j0, k0) * fx;
    let c10 = at(i0, j1, k0) * (1.0 - fx) + at(i1, j1, k0) * fx;
    let c01 = at(i0, j0, k1) * (1.0 - fx) + at(i1, j0, k1) * fx;
    let c11 = at(i0, j1, k1) * (1.0 - fx) + at(i1, j1, k1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    Some(c0 * (1.0 - fz) + c1 * fz)
}

#[inline]
pub(crate) fn sample_nearest(data: &[u8], dims: [usize; 3], p: [f64; 3]) -> u8 {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let x = p[a];
        if !(x >= -0.5 && x < dims[a] as f64 - 0.5) {
            return 0;
        }
        let (i0, r) = split_coord(x);
        let i = if r >= 0.5 { i0 + 1 } else { i0 };
        idx[a] = i.clamp(0, dims[a] as i64 - 1) as usize;
    }
    data[idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])]
}

fn resample_with<T: Send + Copy + Default>(
    target: &Geometry,
    m: &Matrix4<f64>,
    sample: impl Fn([f64; 3]) -> T + Sync,
) -> Vec<T> {
    let [nx, ny, _] = target.dims();
    let mut out = vec![T::default(); target.len()];
    let col0 = [m[(0, 0)], m[(1, 0)], m[(2, 0)]];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
        for j in 0..ny {
            let base = apply_h(m, [0.0, j as f64, k as f64]);
            let row = &mut slab[j * nx..(j + 1) * nx];
            for (i, v) in row.iter_mut().enumerate() {
                let fi = i as f64;
                *v = sample([
                    base[0] + fi * col0[0],
                    base[1] + fi * col0[1],
                    base[2] + fi * col0[2],
                ]);
            }
        }
    });
    out
}

/// Trilinear pullback of `moving` onto `target`; samples outside the moving
/// grid are 0.
pub fn resample_image(moving: &Volume, t: &AffineTransform, target: &Geometry) -> Result<Volume> {
    let m = pullback(moving.geometry(), t, target)?;
    let dims = moving.dims();
    let src = moving.data();
    let data = resample_with(target, &m, |p| {
        sample_trilinear(src, dims, p).map_or(0.0, |v| v as f32)
    });
    Ok(Volume::from_parts_unchecked(target.clone(), data))
}

/// Nearest-neighbour (order-0) pullback; never invents codes.
pub fn resample_labels(moving: &LabelMap, t: &AffineTransform, target: &Geometry) -> Result<LabelMap> {
    let m = pullback(moving.geometry(), t, target)?;
    let dims = moving.dims();
    let src = moving.data();
    let data = resample_with(target, &m, |p| sample_nearest(src, dims, p));
    Ok(LabelMap::from_parts_unchecked(target.clone(), data))
}

/// Brings labels back through a chain of forward transforms (applied in
/// order, `chain[0]` first) using the single composed inverse, so labels are
/// interpolated exactly once.
pub fn apply_inverse_chain(labels: &LabelMap, chain: &[AffineTransform], native: &Geometry) -> Result<LabelMap> {
    if chain.is_empty() && geometry_equal(labels.geometry(), native, 1e-9) {
        return Ok(labels.clone());
    }
    let inverse = compose_chain(chain).invert()?;
    resample_labels(labels, &inverse, native)
}

/// Gaussian label smoothing parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    pub sigma_mm: [f64; 3],
    pub threshold: f64,
}

impl SmoothingSpec {
    pub fn new(sigma_mm: [f64; 3], threshold: f64) -> Result<Self> {
        if sigma_mm.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Validation(format!("smoothing sigma must be >= 0, got {sigma_mm:?}")));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Validation(format!("smoothing threshold must be in (0,1), got {threshold}")));
        }
        Ok(SmoothingSpec { sigma_mm, threshold })
    }

    /// Sigma given in voxels of `geometry`, converted to mm per axis.
    pub fn in_voxels(sigma_voxels: f64, threshold: f64, geometry: &Geometry) -> Result<Self> {
        Self::new(geometry.spacing().map(|s| s * sigma_voxels), threshold)
    }

    /// One voxel sigma, threshold 0.5.
    pub fn default_for(geometry: &Geometry) -> Self {
        Self::in_voxels(1.0, 0.5, geometry).expect("default smoothing spec is valid")
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian filter in place; values beyond the buffer count as 0.
pub(crate) fn gaussian_filter(data: &mut [f32], dims: [usize; 3], sigma_vox: [f64; 3]) {
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let kernel = gaussian_kernel(sigma_vox[axis]);
        if kernel.len() == 1 {
            continue;
        }
        let r = (kernel.len() / 2) as i64;
        let n = dims[axis];
        let stride = strides[axis];
        let mut line = vec![0f64; n];
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[ob] {
            for a in 0..dims[oa] {
                let start = a * strides[oa] + b * strides[ob];
                for (x, l) in line.iter_mut().enumerate() {
                    *l = data[start + x * stride] as f64;
                }
                for x in 0..n as i64 {
                    let lo = (x - r).max(0);
                    let hi = (x + r).min(n as i64 - 1);
                    let mut acc = 0.0;
                    for y in lo..=hi {
                        acc += kernel[(y - x + r) as usize] * line[y as usize];
                    }
                    data[start + x as usize * stride] = acc as f32;
                }
            }
        }
    }
}

/// Gaussian-blurred copy of a volume, sigma in voxels per axis.
pub fn gaussian_blur(vol: &Volume, sigma_vox: [f64; 3]) -> Volume {
    let mut data = vol.data().to_vec();
    gaussian_filter(&mut data, vol.dims(), sigma_vox);
    Volume::from_parts_unchecked(vol.geometry().clone(), data)
}

/// Smooths each label as a binary field and reassigns voxels by argmax.
///
/// Voxels whose best smoothed value falls below `spec.threshold` become
/// background; ties go to the lowest code.
pub fn smooth_labels(labels: &LabelMap, spec: &SmoothingSpec) -> LabelMap {
    let geom = labels.geometry();
    let spacing = geom.spacing();
    let sigma_vox: [f64; 3] = std::array::from_fn(|a| spec.sigma_mm[a] / spacing[a]);
    if sigma_vox.iter().all(|&s| s == 0.0) {
        return labels.clone();
    }
    let dims = geom.dims();
    let radius: [usize; 3] = sigma_vox.map(|s| if s > 0.0 { (4.0 * s).ceil() as usize } else { 0 });
    let mut best = vec![0f32; geom.len()];
    let mut out = vec![0u8; geom.len()];
    for code in labels.codes() {
        let Some((lo, hi)) = labels.bounding_box(|v| v == code) else { continue };
        let start: [usize; 3] = std::array::from_fn(|a| lo[a].saturating_sub(radius[a]));
        let end: [usize; 3] = std::array::from_fn(|a| (hi[a] + radius[a]).min(dims[a] - 1));
        let sub: [usize; 3] = std::array::from_fn(|a| end[a] - start[a] + 1);
        let mut field = vec![0f32; sub[0] * sub[1] * sub[2]];
        for k in 0..sub[2] {
            for j in 0..sub[1] {
                for i in 0..sub[0] {
                    if labels.get(start[0] + i, start[1] + j, start[2] + k) == code {
                        field[i + sub[0] * (j + sub[1] * k)] = 1.0;
                    }
                }
            }
        }
        gaussian_filter(&mut field, sub, sigma_vox);
        for k in 0..sub[2] {
            for j in 0..sub[1] {
                for i in 0..sub[0] {
                    let v = field[i + sub[0] * (j + sub[1] * k)];
                    let n = geom.linear(start[0] + i, start[1] + j, start[2] + k);
                    if v > best[n] {
                        best[n] = v;
                        out[n] = code;
                    }
                }
            }
        }
    }
    let threshold = spec.threshold as f32;
    for (o, b) in out.iter_mut().zip(&best) {
        if *b < threshold {
            *o = 0;
        }
    }
    LabelMap::from_parts_unchecked(geom.clone(), out)
}
