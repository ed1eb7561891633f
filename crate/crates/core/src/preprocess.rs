//! Echo merging, masking, landmark histogram standardization, padding and
//! seeded augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelMap, SubjectRecord, TransformEntry, Volume};
use crate::xform::{resample_image, resample_labels, AffineTransform};

/// Voxelwise mean of the echoes. Values are summed in sorted order so the
/// result does not depend on echo order.
pub fn merge_echoes(echoes: &[Volume]) -> Result<Volume> {
    let first = echoes.first().ok_or_else(|| Error::Empty("no echoes to merge".into()))?;
    for (n, e) in echoes.iter().enumerate().skip(1) {
        first.require_same_grid(e, &format!("echo {n}"))?;
    }
    if echoes.len() == 1 {
        return Ok(first.clone());
    }
    let n = echoes.len() as f64;
    let mut buf = vec![0f32; echoes.len()];
    let data = (0..first.data().len())
        .map(|i| {
            for (b, e) in buf.iter_mut().zip(echoes) {
                *b = e.data()[i];
            }
            buf.sort_unstable_by(f32::total_cmp);
            (buf.iter().map(|&v| v as f64).sum::<f64>() / n) as f32
        })
        .collect();
    Ok(Grid::from_parts_unchecked(first.geometry().clone(), data))
}

/// Zeroes every voxel outside the binary mask.
pub fn apply_brain_mask(vol: &Volume, mask: &LabelMap) -> Result<Volume> {
    vol.require_same_grid(mask, "brain mask")?;
    if !mask.is_binary() {
        return Err(Error::Validation("brain mask is not binary".into()));
    }
    let data = vol
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m != 0 { v } else { 0.0 })
        .collect();
    Ok(Grid::from_parts_unchecked(vol.geometry().clone(), data))
}

/// Decile landmarks with the 1st and 99th percentiles as end points.
pub const DEFAULT_PERCENTILES: [f64; 11] = [1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0];

fn foreground_values(vol: &Volume, mask: &LabelMap) -> Result<Vec<f64>> {
    vol.require_same_grid(mask, "foreground mask")?;
    let mut v: Vec<f64> = vol
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, m)| **m != 0)
        .map(|(v, _)| *v as f64)
        .collect();
    if v.is_empty() {
        return Err(Error::Empty("mask selects no voxels".into()));
    }
    v.sort_unstable_by(f64::total_cmp);
    Ok(v)
}

/// Linear-interpolated percentile of ascending `sorted` values.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let f = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * f
}

/// Percentiles of the voxels selected by `mask`.
pub fn foreground_percentiles(vol: &Volume, mask: &LabelMap, percentiles: &[f64]) -> Result<Vec<f64>> {
    let v = foreground_values(vol, mask)?;
    Ok(percentiles.iter().map(|&p| percentile_sorted(&v, p)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkTable {
    pub percentiles: Vec<f64>,
    pub standard_scale: Vec<f64>,
}

fn strictly_ascending(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

impl LandmarkTable {
    pub fn new(percentiles: Vec<f64>, standard_scale: Vec<f64>) -> Result<Self> {
        check_percentiles(&percentiles)?;
        if standard_scale.len() != percentiles.len() {
            return Err(Error::Validation("one standard-scale value per percentile required".into()));
        }
        if !strictly_ascending(&standard_scale) {
            return Err(Error::Validation(format!("standard scale not strictly ascending: {standard_scale:?}")));
        }
        Ok(LandmarkTable { percentiles, standard_scale })
    }
}

fn check_percentiles(p: &[f64]) -> Result<()> {
    if p.len() < 2 || !strictly_ascending(p) || p[0] <= 0.0 || p[p.len() - 1] >= 100.0 {
        return Err(Error::Validation(format!(
            "percentiles must be at least two strictly ascending values in (0,100), got {p:?}"
        )));
    }
    Ok(())
}

/// Averages each foreground percentile over the training volumes.
pub fn train_landmarks(volumes: &[&Volume], masks: &[&LabelMap], percentiles: &[f64]) -> Result<LandmarkTable> {
    check_percentiles(percentiles)?;
    if volumes.is_empty() {
        return Err(Error::Empty("no training volumes".into()));
    }
    if volumes.len() != masks.len() {
        return Err(Error::Validation("one mask per training volume required".into()));
    }
    let mut sum = vec![0f64; percentiles.len()];
    for (v, m) in volumes.iter().zip(masks) {
        for (s, x) in sum.iter_mut().zip(foreground_percentiles(v, m, percentiles)?) {
            *s += x;
        }
    }
    let scale = sum.into_iter().map(|s| s / volumes.len() as f64).collect();
    LandmarkTable::new(percentiles.to_vec(), scale)
}

/// Piecewise-linear intensity map between two landmark sets, extended
/// linearly past the end segments.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkMap {
    from: Vec<f64>,
    to: Vec<f64>,
}

impl LandmarkMap {
    pub fn new(from: Vec<f64>, to: Vec<f64>) -> Result<Self> {
        if from.len() != to.len() || from.len() < 2 {
            return Err(Error::Validation("landmark map needs two equal-length sets of >= 2 points".into()));
        }
        if !strictly_ascending(&from) {
            return Err(Error::Validation("degenerate foreground: landmarks are not strictly ascending".into()));
        }
        if !strictly_ascending(&to) {
            return Err(Error::Validation("target landmarks are not strictly ascending".into()));
        }
        Ok(LandmarkMap { from, to })
    }

    pub fn apply(&self, x: f64) -> f64 {
        let n = self.from.len();
        let seg = match self.from.iter().position(|&f| x < f) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => n - 2,
        };
        let seg = seg.min(n - 2);
        let (x0, x1) = (self.from[seg], self.from[seg + 1]);
        let (y0, y1) = (self.to[seg], self.to[seg + 1]);
        y0 + (x - x0) * (y1 - y0) / (x1 - x0)
    }
}

/// Maps foreground intensities so their percentiles land on the table's
/// standard scale. Voxels outside `mask` are left unchanged.
pub fn standardize_histogram(vol: &Volume, mask: &LabelMap, table: &LandmarkTable) -> Result<Volume> {
    let own = foreground_percentiles(vol, mask, &table.percentiles)?;
    let map = LandmarkMap::new(own, table.standard_scale.clone())?;
    let data = vol
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m != 0 { map.apply(v as f64) as f32 } else { v })
        .collect();
    Volume::new(vol.geometry().clone(), data)
}

/// Index of the original voxel 0 inside a grid padded from `dims` to `target`.
pub fn pad_offset(dims: [usize; 3], target: [usize; 3]) -> [usize; 3] {
    std::array::from_fn(|a| target[a].saturating_sub(dims[a]) / 2)
}

/// Centres `grid` in a larger grid of `target` dims (extra voxel on the high
/// side for odd differences), keeping world positions of existing voxels.
pub fn pad_to_shape<T: Copy + Default>(grid: &Grid<T>, target: [usize; 3], fill: T) -> Result<Grid<T>> {
    let dims = grid.dims();
    if (0..3).any(|a| target[a] < dims[a]) {
        return Err(Error::Validation(format!("cannot pad {dims:?} down to {target:?}")));
    }
    if target == dims {
        return Ok(grid.clone());
    }
    let offset = pad_offset(dims, target);
    let geom = grid.geometry().window(offset.map(|o| -(o as i64)), target)?;
    let mut data = vec![fill; geom.len()];
    let src = grid.data();
    let [nx, ny, nz] = dims;
    for k in 0..nz {
        for j in 0..ny {
            let s = nx * (j + ny * k);
            let d = geom.linear(offset[0], offset[1] + j, offset[2] + k);
            data[d..d + nx].copy_from_slice(&src[s..s + nx]);
        }
    }
    Ok(Grid::from_parts_unchecked(geom, data))
}

/// Sampling bounds for augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentBounds {
    pub max_rotation_deg: [f64; 3],
    pub max_translation_mm: [f64; 3],
    pub max_scale_delta: f64,
    pub noise_std_fraction: f64,
}

impl AugmentBounds {
    /// Small rotations and scaling; translation only within the sagittal
    /// plane (index axes 1 and 2).
    pub fn method1() -> Self {
        AugmentBounds {
            max_rotation_deg: [2.0; 3],
            max_translation_mm: [0.0, 2.0, 2.0],
            max_scale_delta: 0.05,
            noise_std_fraction: 0.02,
        }
    }

    pub fn method2() -> Self {
        AugmentBounds {
            max_rotation_deg: [15.0; 3],
            max_translation_mm: [15.0; 3],
            max_scale_delta: 0.2,
            noise_std_fraction: 0.02,
        }
    }

    pub fn none() -> Self {
        AugmentBounds {
            max_rotation_deg: [0.0; 3],
            max_translation_mm: [0.0; 3],
            max_scale_delta: 0.0,
            noise_std_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .max_rotation_deg
            .iter()
            .chain(&self.max_translation_mm)
            .chain([&self.max_scale_delta, &self.noise_std_fraction]);
        for v in all {
            if !(*v >= 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("augmentation bounds must be finite and >= 0, got {v}")));
            }
        }
        if self.max_scale_delta >= 1.0 {
            return Err(Error::Validation("max_scale_delta must be < 1".into()));
        }
        Ok(())
    }
}

/// One sampled augmentation pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub rotation_deg: [f64; 3],
    pub translation_mm: [f64; 3],
    pub scale: f64,
}

fn uniform(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.random_range(-bound..=bound)
    }
}

pub fn sample_augmentation(bounds: &AugmentBounds, rng: &mut ChaCha8Rng) -> AugmentDraw {
    AugmentDraw {
        rotation_deg: bounds.max_rotation_deg.map(|b| uniform(rng, b)),
        translation_mm: bounds.max_translation_mm.map(|b| uniform(rng, b)),
        scale: 1.0 + uniform(rng, bounds.max_scale_delta),
    }
}

impl AugmentDraw {
    /// The draw as a world transform about `center`.
    pub fn transform(&self, center: [f64; 3]) -> AffineTransform {
        if self.rotation_deg == [0.0; 3] && self.translation_mm == [0.0; 3] && self.scale == 1.0 {
            return AffineTransform::identity();
        }
        AffineTransform::translation(self.translation_mm).compose(
            &AffineTransform::rotation_deg(self.rotation_deg)
                .compose(&AffineTransform::scaling([self.scale; 3]))
                .about(center),
        )
    }
}

fn interquartile_range(vol: &Volume, mask: &LabelMap) -> Result<f64> {
    let v = foreground_values(vol, mask)?;
    Ok(percentile_sorted(&v, 75.0) - percentile_sorted(&v, 25.0))
}

fn add_noise(vol: &Volume, mask: &LabelMap, std: f64, rng: &mut ChaCha8Rng) -> Result<Volume> {
    if std <= 0.0 {
        return Ok(vol.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Validation(e.to_string()))?;
    let data = vol
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m != 0 { (v as f64 + normal.sample(rng)) as f32 } else { v })
        .collect();
    Volume::new(vol.geometry().clone(), data)
}

/// Applies one random pose to every image and label of `subject` (labels
/// and mask nearest-neighbour) and adds Gaussian noise to the T1 and T2
/// foreground. The pose is appended to the transform log.
pub fn augment(subject: &SubjectRecord, bounds: &AugmentBounds, seed: u64) -> Result<SubjectRecord> {
    bounds.validate()?;
    subject.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = sample_augmentation(bounds, &mut rng);
    let geom = subject.geometry().clone();
    let t = draw.transform(geom.center_world());
    let mask = resample_labels(&subject.brain_mask, &t, &geom)?;
    let truth = subject.truth.as_ref().map(|l| resample_labels(l, &t, &geom)).transpose()?;
    let mut out = SubjectRecord {
        id: subject.id.clone(),
        dataset: subject.dataset.clone(),
        t1: resample_image(&subject.t1, &t, &geom)?,
        t2: resample_image(&subject.t2, &t, &geom)?,
        brain_mask: mask,
        truth,
        transform_log: subject.transform_log.clone(),
    };
    if bounds.noise_std_fraction > 0.0 {
        let s1 = bounds.noise_std_fraction * interquartile_range(&subject.t1, &subject.brain_mask)?;
        let s2 = bounds.noise_std_fraction * interquartile_range(&subject.t2, &subject.brain_mask)?;
        out.t1 = add_noise(&out.t1, &out.brain_mask, s1, &mut rng)?;
        out.t2 = add_noise(&out.t2, &out.brain_mask, s2, &mut rng)?;
    }
    out.transform_log.push(TransformEntry { stage: "augment".into(), transform: t });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn g(dims: [usize; 3]) -> Geometry {
        Geometry::centered(dims, [1.0; 3]).unwrap()
    }

    fn constant(geom: &Geometry, v: f32) -> Volume {
        Volume::new(geom.clone(), vec![v; geom.len()]).unwrap()
    }

    #[test]
    fn merge_examples() {
        let geom = g([3, 3, 3]);
        let a = constant(&geom, 10.0);
        assert_eq!(merge_echoes(std::slice::from_ref(&a)).unwrap(), a);
        let m = merge_echoes(&[a.clone(), constant(&geom, 20.0)]).unwrap();
        assert!(m.data().iter().all(|v| *v == 15.0));
        assert!(merge_echoes(&[a, constant(&g([3, 3, 4]), 1.0)]).is_err());
        assert!(merge_echoes(&[]).is_err());
    }

    #[test]
    fn mask_examples() {
        let geom = g([4, 4, 4]);
        let v = Volume::from_fn(geom.clone(), |p| (p[0] + p[1] + p[2]) as f32).unwrap();
        let ones = LabelMap::new(geom.clone(), vec![1; 64]).unwrap();
        assert_eq!(apply_brain_mask(&v, &ones).unwrap(), v);
        let zeros = LabelMap::empty(geom.clone());
        assert!(apply_brain_mask(&v, &zeros).unwrap().data().iter().all(|x| *x == 0.0));
        let two = LabelMap::new(geom.clone(), vec![2; 64]).unwrap();
        assert!(apply_brain_mask(&v, &two).is_err());
    }

    #[test]
    fn landmark_training() {
        let geom = g([10, 10, 10]);
        let a = Volume::from_fn(geom.clone(), |p| (1 + p[0] + 10 * p[1] + 100 * p[2]) as f32).unwrap();
        let b = a.map(|v| v * 2.0).unwrap();
        let mask = LabelMap::new(geom.clone(), vec![1; 1000]).unwrap();
        let own = foreground_percentiles(&a, &mask, &DEFAULT_PERCENTILES).unwrap();
        let t1 = train_landmarks(&[&a], &[&mask], &DEFAULT_PERCENTILES).unwrap();
        assert_eq!(t1.standard_scale, own);
        let t2 = train_landmarks(&[&a, &b], &[&mask, &mask], &DEFAULT_PERCENTILES).unwrap();
        for (s, o) in t2.standard_scale.iter().zip(&own) {
            assert!((s - 1.5 * o).abs() < 1e-9);
        }
        assert!(train_landmarks(&[&a], &[&mask], &[10.0, 10.0]).is_err());
        assert!(train_landmarks(&[&constant(&geom, 3.0)], &[&mask], &DEFAULT_PERCENTILES).is_err());
        let json = serde_json::to_value(&t1).unwrap();
        assert!(json["percentiles"].is_array() && json["standard_scale"].is_array());
    }

    #[test]
    fn standardization_pins_landmarks() {
        let geom = g([10, 10, 10]);
        let a = Volume::from_fn(geom.clone(), |p| (1 + p[0] + 10 * p[1] + 100 * p[2]) as f32).unwrap();
        let mask = LabelMap::new(geom.clone(), vec![1; 1000]).unwrap();
        let own = train_landmarks(&[&a], &[&mask], &DEFAULT_PERCENTILES).unwrap();
        let same = standardize_histogram(&a, &mask, &own).unwrap();
        for (x, y) in same.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-5 * y.abs().max(1.0));
        }
        let target = LandmarkTable::new(
            DEFAULT_PERCENTILES.to_vec(),
            (0..11).map(|i| 100.0 + 10.0 * i as f64).collect(),
        )
        .unwrap();
        let s = standardize_histogram(&a, &mask, &target).unwrap();
        let own_p = foreground_percentiles(&a, &mask, &DEFAULT_PERCENTILES).unwrap();
        let map = LandmarkMap::new(own_p.clone(), target.standard_scale.clone()).unwrap();
        assert_eq!(map.apply(own_p[1]), 110.0);
        let p = foreground_percentiles(&s, &mask, &DEFAULT_PERCENTILES).unwrap();
        assert!((p[1] - 110.0).abs() < 0.01, "{p:?}");
        assert!(standardize_histogram(&constant(&geom, 1.0), &mask, &target).is_err());
    }

    #[test]
    fn landmark_map_extrapolates() {
        let m = LandmarkMap::new(vec![0.0, 1.0, 2.0], vec![0.0, 10.0, 30.0]).unwrap();
        assert_eq!(m.apply(-1.0), -10.0);
        assert_eq!(m.apply(0.5), 5.0);
        assert_eq!(m.apply(1.5), 20.0);
        assert_eq!(m.apply(3.0), 50.0);
    }

    #[test]
    fn padding_preserves_world() {
        let geom = g([10, 10, 10]);
        let v = Volume::from_fn(geom.clone(), |p| (p[0] * 100 + p[1] * 10 + p[2]) as f32).unwrap();
        assert_eq!(pad_to_shape(&v, [10; 3], 0.0).unwrap(), v);
        let p = pad_to_shape(&v, [12; 3], 0.0).unwrap();
        assert_eq!(p.get(1 + 3, 1 + 4, 1 + 5), v.get(3, 4, 5));
        assert_eq!(
            p.geometry().index_to_world_point([4.0, 5.0, 6.0]),
            geom.index_to_world_point([3.0, 4.0, 5.0])
        );
        let odd = pad_to_shape(&v, [13, 10, 10], 0.0).unwrap();
        assert_eq!(odd.get(1, 0, 0), v.get(0, 0, 0));
        assert!(pad_to_shape(&v, [9, 10, 10], 0.0).is_err());
        let labels = LabelMap::from_fn(geom, |p| (p[0] == 2) as u8 * 4).unwrap();
        assert_eq!(pad_to_shape(&labels, [14, 11, 12], 0).unwrap().codes(), vec![4]);
    }

    fn subject() -> SubjectRecord {
        let geom = g([24, 24, 24]);
        let ball = |r: f64| {
            LabelMap::from_fn(geom.clone(), |p| {
                ((0..3).map(|a| (p[a] as f64 - 11.5).powi(2)).sum::<f64>() <= r * r) as u8
            })
            .unwrap()
        };
        let mask = ball(10.0);
        let truth = LabelMap::from_fn(geom.clone(), |p| {
            ((0..3).map(|a| (p[a] as f64 - 11.5).powi(2)).sum::<f64>() <= 16.0) as u8
        })
        .unwrap();
        let t1 = Volume::from_fn(geom.clone(), |p| if mask.get(p[0], p[1], p[2]) != 0 { 1.0 + p[0] as f32 * 0.01 } else { 0.0 }).unwrap();
        let t2 = t1.map(|v| v * 0.5).unwrap();
        SubjectRecord {
            id: "s".into(),
            dataset: "d".into(),
            t1,
            t2,
            brain_mask: mask,
            truth: Some(truth),
            transform_log: vec![],
        }
    }

    #[test]
    fn augment_zero_bounds_is_identity() {
        let s = subject();
        let a = augment(&s, &AugmentBounds::none(), 3).unwrap();
        assert_eq!(a.t1, s.t1);
        assert_eq!(a.truth, s.truth);
        assert_eq!(a.transform_log.len(), 1);
        assert_eq!(a.transform_log[0].transform, AffineTransform::identity());
        let noisy = augment(&s, &AugmentBounds { noise_std_fraction: 0.5, ..AugmentBounds::none() }, 3).unwrap();
        assert_eq!(noisy.truth, s.truth);
        assert_ne!(noisy.t1, s.t1);
    }

    #[test]
    fn augment_is_seeded() {
        let s = subject();
        let a = augment(&s, &AugmentBounds::method2(), 9).unwrap();
        let b = augment(&s, &AugmentBounds::method2(), 9).unwrap();
        assert_eq!(a.t1, b.t1);
        assert_eq!(a.transform_log, b.transform_log);
        let c = augment(&s, &AugmentBounds::method2(), 10).unwrap();
        assert_ne!(a.transform_log, c.transform_log);
    }

    #[test]
    fn method1_draws_stay_in_bounds() {
        let b = AugmentBounds::method1();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let d = sample_augmentation(&b, &mut rng);
            assert!(d.rotation_deg.iter().all(|r| r.abs() <= 2.0));
            assert!(d.translation_mm.iter().all(|t| t.abs() <= 2.0));
            assert_eq!(d.translation_mm[0], 0.0);
            assert!((d.scale - 1.0).abs() <= 0.05);
        }
    }
}
