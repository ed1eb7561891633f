//! Intensity-based affine registration.
//!
//! The optimizer searches the pullback map (fixed world to moving world) in a
//! 12-parameter form anchored at the fixed-image centre, coarse to fine over a
//! Gaussian pyramid, using coordinate descent with step halving. Similarity is
//! evaluated on a seeded random subset of fixed-image foreground voxels.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Grid, LabelMap, Volume};
use crate::xform::{euler_matrix, gaussian_blur, sample_trilinear, AffineTransform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityKind {
    #[serde(rename = "msd")]
    MeanSquaredDifference,
    #[serde(rename = "nmi")]
    NormalizedMutualInformation,
}

impl SimilarityKind {
    /// True when larger values mean better alignment.
    pub fn higher_is_better(self) -> bool {
        self == SimilarityKind::NormalizedMutualInformation
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationParams {
    pub levels: usize,
    pub similarity: SimilarityKind,
    /// Coordinate-descent sweeps per pyramid level.
    pub max_iters: usize,
    pub histogram_bins: usize,
    /// Initial step per parameter at the finest level, in parameter units
    /// (rad, mm, log-scale, shear); doubled per coarser level.
    pub parameter_scales: [f64; 12],
    /// Step halvings per level before the level is considered converged.
    pub halvings: usize,
    /// Foreground voxels sampled per level.
    pub samples: usize,
    pub seed: u64,
    /// Start from the offset between foreground centroids.
    pub init_centroid: bool,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        RegistrationParams {
            levels: 3,
            similarity: SimilarityKind::NormalizedMutualInformation,
            max_iters: 80,
            histogram_bins: 32,
            parameter_scales: [
                deg, deg, deg, 1.0, 1.0, 1.0, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01,
            ],
            halvings: 6,
            samples: 20_000,
            seed: 0,
            init_centroid: true,
        }
    }
}

impl RegistrationParams {
    pub fn msd() -> Self {
        RegistrationParams { similarity: SimilarityKind::MeanSquaredDifference, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Validation("registration levels must be >= 1".into()));
        }
        if self.histogram_bins < 8 || self.histogram_bins > u16::MAX as usize {
            return Err(Error::Validation(format!("histogram bins must be >= 8, got {}", self.histogram_bins)));
        }
        if self.max_iters < 1 {
            return Err(Error::Validation("max_iters must be >= 1".into()));
        }
        if self.samples < 100 {
            return Err(Error::Validation("samples must be >= 100".into()));
        }
        if self.parameter_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Validation("parameter scales must be positive".into()));
        }
        Ok(())
    }
}

/// Twelve affine parameters about a fixed centre: x ↦ R·Sh·S·(x − c) + c + t,
/// with R = Rz·Ry·Rx, S = diag(exp(log_scale)) and Sh unit upper triangular
/// with entries (xy, xz, yz).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineDof {
    pub rotation_rad: [f64; 3],
    pub translation_mm: [f64; 3],
    pub log_scale: [f64; 3],
    pub shear: [f64; 3],
    pub center_mm: [f64; 3],
}

impl AffineDof {
    pub fn identity(center_mm: [f64; 3]) -> Self {
        AffineDof {
            rotation_rad: [0.0; 3],
            translation_mm: [0.0; 3],
            log_scale: [0.0; 3],
            shear: [0.0; 3],
            center_mm,
        }
    }

    pub fn to_array(&self) -> [f64; 12] {
        let mut a = [0.0; 12];
        a[0..3].copy_from_slice(&self.rotation_rad);
        a[3..6].copy_from_slice(&self.translation_mm);
        a[6..9].copy_from_slice(&self.log_scale);
        a[9..12].copy_from_slice(&self.shear);
        a
    }

    pub fn from_array(a: &[f64; 12], center_mm: [f64; 3]) -> Self {
        AffineDof {
            rotation_rad: [a[0], a[1], a[2]],
            translation_mm: [a[3], a[4], a[5]],
            log_scale: [a[6], a[7], a[8]],
            shear: [a[9], a[10], a[11]],
            center_mm,
        }
    }

    fn linear(&self) -> Matrix3<f64> {
        let r = euler_matrix(self.rotation_rad);
        let [a, b, c] = self.shear;
        let sh = Matrix3::new(1.0, a, b, 0.0, 1.0, c, 0.0, 0.0, 1.0);
        let s = Matrix3::from_diagonal(&Vector3::from(self.log_scale.map(f64::exp)));
        r * sh * s
    }

    pub fn to_matrix(&self) -> AffineTransform {
        let l = self.linear();
        let c = Vector3::from(self.center_mm);
        let t = Vector3::from(self.translation_mm);
        AffineTransform::from_linear(l, c + t - l * c)
    }

    /// Decomposes an orientation-preserving affine about `center_mm`.
    pub fn from_matrix(t: &AffineTransform, center_mm: [f64; 3]) -> Result<Self> {
        let l = t.linear_part();
        let det = l.determinant();
        if det <= 1e-12 {
            return Err(Error::Validation(format!(
                "affine with determinant {det:e} has no rotation/scale/shear decomposition"
            )));
        }
        let qr = l.qr();
        let (mut q, mut r) = (qr.q(), qr.r());
        for i in 0..3 {
            if r[(i, i)] < 0.0 {
                for j in 0..3 {
                    r[(i, j)] = -r[(i, j)];
                    q[(j, i)] = -q[(j, i)];
                }
            }
        }
        let s = [r[(0, 0)], r[(1, 1)], r[(2, 2)]];
        let shear = [r[(0, 1)] / s[1], r[(0, 2)] / s[2], r[(1, 2)] / s[2]];
        let ry = (-q[(2, 0)]).clamp(-1.0, 1.0).asin();
        let rx = q[(2, 1)].atan2(q[(2, 2)]);
        let rz = q[(1, 0)].atan2(q[(0, 0)]);
        let c = Vector3::from(center_mm);
        let p_c = l * c + Vector3::from(t.translation_part());
        let tr = p_c - c;
        Ok(AffineDof {
            rotation_rad: [rx, ry, rz],
            translation_mm: [tr[0], tr[1], tr[2]],
            log_scale: s.map(f64::ln),
            shear,
            center_mm,
        })
    }
}

/// Per-level optimizer summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub sweeps: usize,
    pub evaluations: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationOutcome {
    /// Maps moving world to fixed world; resampling `moving` with it onto the
    /// fixed grid aligns the two.
    pub transform: AffineTransform,
    /// Parameters of the pullback (fixed world to moving world).
    pub dof: AffineDof,
    pub initial_similarity: f64,
    pub final_similarity: f64,
    pub levels: Vec<LevelReport>,
}

fn erode6(mask: &[u8], dims: [usize; 3]) -> Vec<u8> {
    let [nx, ny, nz] = dims;
    let mut out = vec![0u8; mask.len()];
    for k in 1..nz.saturating_sub(1) {
        for j in 1..ny.saturating_sub(1) {
            for i in 1..nx.saturating_sub(1) {
                let n = i + nx * (j + ny * k);
                if mask[n] != 0
                    && mask[n - 1] != 0
                    && mask[n + 1] != 0
                    && mask[n - nx] != 0
                    && mask[n + nx] != 0
                    && mask[n - nx * ny] != 0
                    && mask[n + nx * ny] != 0
                {
                    out[n] = 1;
                }
            }
        }
    }
    out
}

fn decimate(vol: &Volume) -> Result<Volume> {
    let blurred = gaussian_blur(vol, [1.0; 3]);
    let geom = vol.geometry().decimated(2)?;
    let [nx, ny, nz] = geom.dims();
    let mut data = Vec::with_capacity(geom.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                data.push(blurred.get(2 * i, 2 * j, 2 * k));
            }
        }
    }
    Ok(Grid::from_parts_unchecked(geom, data))
}

fn pyramid(vol: &Volume, levels: usize) -> Result<Vec<Volume>> {
    let mut out = vec![vol.clone()];
    for _ in 1..levels {
        let next = decimate(out.last().unwrap())?;
        if next.dims().iter().any(|&d| d < 4) {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

/// Joint-histogram NMI. Fixed samples are pre-binned; moving values are
/// spread linearly over the two nearest bins of [lo, hi].
fn nmi(fixed_bins: &[u16], moving: &[Option<f64>], lo: f64, hi: f64, bins: usize) -> Option<f64> {
    let mut joint = vec![0f64; bins * bins];
    let top = (bins - 1) as f64;
    let scale = if hi > lo { top / (hi - lo) } else { 0.0 };
    let mut total = 0.0;
    for (&fb, m) in fixed_bins.iter().zip(moving) {
        let Some(m) = m else { continue };
        let x = ((m - lo) * scale).clamp(0.0, top);
        let b0 = x.floor() as usize;
        let w = x - b0 as f64;
        let row = fb as usize * bins;
        if b0 + 1 < bins {
            joint[row + b0] += 1.0 - w;
            joint[row + b0 + 1] += w;
        } else {
            joint[row + b0] += 1.0;
        }
        total += 1.0;
    }
    if total == 0.0 {
        return None;
    }
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    let mut hf = 0.0;
    let mut hm = 0.0;
    let mut hj = 0.0;
    let mut col = vec![0f64; bins];
    for f in 0..bins {
        let mut rs = 0.0;
        for m in 0..bins {
            let v = joint[f * bins + m];
            rs += v;
            col[m] += v;
            hj += h(v / total);
        }
        hf += h(rs / total);
    }
    for c in col {
        hm += h(c / total);
    }
    Some(if hj > 0.0 { (hf + hm) / hj } else { 1.0 })
}

fn fixed_binning(values: &[f64], bins: usize) -> Vec<u16> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let top = (bins - 1) as f64;
    values
        .iter()
        .map(|v| if hi > lo { ((v - lo) / (hi - lo) * top).round() as u16 } else { 0 })
        .collect()
}

/// Similarity between a fixed image and a moving image already resampled
/// onto the same grid, over the fixed foreground (fixed > 0, eroded by one
/// voxel). MSD: lower is better; NMI: higher is better.
pub fn similarity(fixed: &Volume, moving_resampled: &Volume, kind: SimilarityKind, bins: usize) -> Result<f64> {
    fixed.require_same_grid(moving_resampled, "similarity")?;
    let fg: Vec<u8> = fixed.data().iter().map(|&v| (v > 0.0) as u8).collect();
    let fg = erode6(&fg, fixed.dims());
    let idx: Vec<usize> = (0..fg.len()).filter(|&i| fg[i] != 0).collect();
    if idx.is_empty() {
        return Err(Error::Empty("fixed image has no foreground".into()));
    }
    let f: Vec<f64> = idx.iter().map(|&i| fixed.data()[i] as f64).collect();
    let m: Vec<f64> = idx.iter().map(|&i| moving_resampled.data()[i] as f64).collect();
    Ok(match kind {
        SimilarityKind::MeanSquaredDifference => {
            f.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / f.len() as f64
        }
        SimilarityKind::NormalizedMutualInformation => {
            if bins < 2 {
                return Err(Error::Validation("need at least 2 bins".into()));
            }
            let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mv: Vec<Option<f64>> = m.into_iter().map(Some).collect();
            nmi(&fixed_binning(&f, bins), &mv, lo, hi, bins).unwrap_or(1.0)
        }
    })
}

/// Sampled fixed voxels and the moving image at one pyramid level.
struct Level<'a> {
    points: Vec<[f64; 3]>,
    fixed_values: Vec<f64>,
    fixed_bins: Vec<u16>,
    fixed_i2w: Matrix4<f64>,
    moving: &'a Volume,
    moving_range: (f64, f64),
    kind: SimilarityKind,
    bins: usize,
    scratch: std::cell::RefCell<Vec<Option<f64>>>,
}

impl<'a> Level<'a> {
    fn new(
        fixed: &Volume,
        fg_full: &[u8],
        full_dims: [usize; 3],
        factor: usize,
        moving: &'a Volume,
        params: &RegistrationParams,
        level: usize,
    ) -> Result<Level<'a>> {
        let [nx, ny, nz] = fixed.dims();
        let mut cand = Vec::new();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let (fi, fj, fk) = (i * factor, j * factor, k * factor);
                    if fi < full_dims[0] && fj < full_dims[1] && fk < full_dims[2] {
                        let n = fi + full_dims[0] * (fj + full_dims[1] * fk);
                        if fg_full[n] != 0 {
                            cand.push([i, j, k]);
                        }
                    }
                }
            }
        }
        if cand.is_empty() {
            return Err(Error::Empty("registration foreground is empty".into()));
        }
        if cand.len() > params.samples {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ (level as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut pick = rand::seq::index::sample(&mut rng, cand.len(), params.samples).into_vec();
            pick.sort_unstable();
            cand = pick.into_iter().map(|i| cand[i]).collect();
        }
        let fixed_values: Vec<f64> = cand.iter().map(|p| fixed.get(p[0], p[1], p[2]) as f64).collect();
        let fixed_bins = fixed_binning(&fixed_values, params.histogram_bins);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in moving.data() {
            if v > 0.0 {
                lo = lo.min(v as f64);
                hi = hi.max(v as f64);
            }
        }
        if !lo.is_finite() {
            return Err(Error::Empty("moving image has no foreground".into()));
        }
        let n = cand.len();
        Ok(Level {
            points: cand.into_iter().map(|p| p.map(|v| v as f64)).collect(),
            fixed_values,
            fixed_bins,
            fixed_i2w: *fixed.geometry().index_to_world(),
            moving,
            moving_range: (lo, hi),
            kind: params.similarity,
            bins: params.histogram_bins,
            scratch: std::cell::RefCell::new(vec![None; n]),
        })
    }

    /// Cost (lower is better) of the pullback `p`; infinite when less than
    /// half of the samples land inside the moving grid.
    fn cost(&self, p: &Matrix4<f64>) -> f64 {
        let m = self.moving.geometry().world_to_index() * p * self.fixed_i2w;
        let dims = self.moving.dims();
        let data = self.moving.data();
        let mut vals = self.scratch.borrow_mut();
        let mut valid = 0usize;
        for (v, q) in vals.iter_mut().zip(&self.points) {
            let x = [
                m[(0, 0)] * q[0] + m[(0, 1)] * q[1] + m[(0, 2)] * q[2] + m[(0, 3)],
                m[(1, 0)] * q[0] + m[(1, 1)] * q[1] + m[(1, 2)] * q[2] + m[(1, 3)],
                m[(2, 0)] * q[0] + m[(2, 1)] * q[1] + m[(2, 2)] * q[2] + m[(2, 3)],
            ];
            *v = sample_trilinear(data, dims, x);
            valid += v.is_some() as usize;
        }
        if valid * 2 < self.points.len() {
            return f64::INFINITY;
        }
        match self.kind {
            SimilarityKind::MeanSquaredDifference => {
                let mut s = 0.0;
                for (f, v) in self.fixed_values.iter().zip(vals.iter()) {
                    if let Some(v) = v {
                        s += (f - v) * (f - v);
                    }
                }
                s / valid as f64
            }
            SimilarityKind::NormalizedMutualInformation => {
                let (lo, hi) = self.moving_range;
                -nmi(&self.fixed_bins, &vals, lo, hi, self.bins).unwrap_or(1.0)
            }
        }
    }
}

fn to_similarity(kind: SimilarityKind, cost: f64) -> f64 {
    if kind.higher_is_better() {
        -cost
    } else {
        cost
    }
}

fn foreground_centroid(data: &[u8], geom: &Geometry) -> Option<[f64; 3]> {
    let mut s = [0f64; 3];
    let mut n = 0f64;
    for (idx, &v) in data.iter().enumerate() {
        if v != 0 {
            let p = geom.unravel(idx);
            for a in 0..3 {
                s[a] += p[a] as f64;
            }
            n += 1.0;
        }
    }
    (n > 0.0).then(|| geom.index_to_world_point(s.map(|v| v / n)))
}

/// Registers `moving` onto `fixed` using the fixed foreground (fixed > 0).
pub fn register_affine(fixed: &Volume, moving: &Volume, params: &RegistrationParams) -> Result<RegistrationOutcome> {
    register_affine_with_mask(fixed, moving, None, params)
}

/// As [`register_affine`], with an explicit fixed-image foreground mask.
pub fn register_affine_with_mask(
    fixed: &Volume,
    moving: &Volume,
    fixed_mask: Option<&LabelMap>,
    params: &RegistrationParams,
) -> Result<RegistrationOutcome> {
    params.validate()?;
    let fg_raw: Vec<u8> = match fixed_mask {
        Some(m) => {
            fixed.require_same_grid(m, "registration mask")?;
            m.data().iter().map(|&v| (v != 0) as u8).collect()
        }
        None => fixed.data().iter().map(|&v| (v > 0.0) as u8).collect(),
    };
    let mut fg = erode6(&fg_raw, fixed.dims());
    if fg.iter().all(|&v| v == 0) {
        fg = fg_raw.clone();
    }
    let center = fixed.geometry().center_world();
    let mut init = AffineDof::identity(center);
    if params.init_centroid {
        let moving_fg: Vec<u8> = moving.data().iter().map(|&v| (v > 0.0) as u8).collect();
        if let (Some(cf), Some(cm)) = (
            foreground_centroid(&fg_raw, fixed.geometry()),
            foreground_centroid(&moving_fg, moving.geometry()),
        ) {
            init.translation_mm = std::array::from_fn(|a| cm[a] - cf[a]);
        }
    }
    let init_params = init.to_array();

    let fixed_pyr = pyramid(fixed, params.levels)?;
    let moving_pyr = pyramid(moving, fixed_pyr.len())?;
    let n_levels = fixed_pyr.len().min(moving_pyr.len());
    let full_dims = fixed.dims();
    let eval = |level: &Level, a: &[f64; 12]| level.cost(AffineDof::from_array(a, center).to_matrix().matrix());

    let mut current = init_params;
    let mut reports = Vec::new();
    let mut initial_similarity = f64::NAN;
    let mut final_cost = f64::INFINITY;
    for l in (0..n_levels).rev() {
        let level = Level::new(&fixed_pyr[l], &fg, full_dims, 1 << l, &moving_pyr[l], params, l)?;
        let mut evaluations = 0usize;
        let init_cost = eval(&level, &init_params);
        let warm_cost = eval(&level, &current);
        evaluations += 2;
        let (mut best, mut best_cost) = if warm_cost <= init_cost { (current, warm_cost) } else { (init_params, init_cost) };
        if l == 0 {
            initial_similarity = to_similarity(params.similarity, init_cost);
        }
        if !best_cost.is_finite() {
            return Err(Error::Registration {
                reason: format!("images do not overlap at pyramid level {l}"),
                similarity: to_similarity(params.similarity, best_cost),
            });
        }
        let factor = (1u64 << l) as f64;
        let mut steps: [f64; 12] = params.parameter_scales.map(|s| s * factor);
        let mut halvings = 0;
        let mut sweeps = 0;
        while sweeps < params.max_iters && halvings <= params.halvings {
            sweeps += 1;
            let mut improved = false;
            for d in 0..12 {
                for sign in [1.0, -1.0] {
                    let mut moved = false;
                    loop {
                        let mut trial = best;
                        trial[d] += sign * steps[d];
                        let c = eval(&level, &trial);
                        evaluations += 1;
                        if c < best_cost {
                            best = trial;
                            best_cost = c;
                            moved = true;
                        } else {
                            break;
                        }
                    }
                    if moved {
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                for s in steps.iter_mut() {
                    *s *= 0.5;
                }
                halvings += 1;
            }
        }
        current = best;
        final_cost = best_cost;
        reports.push(LevelReport {
            level: l,
            sweeps,
            evaluations,
            similarity: to_similarity(params.similarity, best_cost),
        });
    }
    let dof = AffineDof::from_array(&current, center);
    let transform = dof.to_matrix().invert()?;
    Ok(RegistrationOutcome {
        transform,
        dof,
        initial_similarity,
        final_similarity: to_similarity(params.similarity, final_cost),
        levels: reports,
    })
}

/// Mean distance (mm) between two transforms' images of the corners of a box.
pub fn corner_displacement(a: &AffineTransform, b: &AffineTransform, lo: [f64; 3], hi: [f64; 3]) -> f64 {
    let mut sum = 0.0;
    for c in 0..8 {
        let p = [
            if c & 1 == 0 { lo[0] } else { hi[0] },
            if c & 2 == 0 { lo[1] } else { hi[1] },
            if c & 4 == 0 { lo[2] } else { hi[2] },
        ];
        let (x, y) = (a.apply(p), b.apply(p));
        sum += (0..3).map(|i| (x[i] - y[i]).powi(2)).sum::<f64>().sqrt();
    }
    sum / 8.0
}
