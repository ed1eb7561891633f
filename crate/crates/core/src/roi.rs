//! Regions of interest: the pooled label box used in template space, the
//! fixed-shape window around a centre of mass used in native space, and the
//! brain-centroid-offset localizer that predicts that centre.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{geometry_equal, Geometry, Grid, LabelMap, SubjectRecord};

/// Default window shape around the predicted centre of mass, in voxels.
pub const DEFAULT_ROI_SHAPE: [usize; 3] = [78, 72, 60];
/// Default margin added around pooled label extents, in voxels.
pub const DEFAULT_ROI_MARGIN: usize = 10;

/// Inclusive voxel box on a reference grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub min_index: [usize; 3],
    pub max_index: [usize; 3],
    pub grid_dims: [usize; 3],
}

impl RoiBox {
    pub fn shape(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.max_index[a] - self.min_index[a] + 1)
    }

    pub fn start(&self) -> [i64; 3] {
        self.min_index.map(|v| v as i64)
    }
}

/// Union of the labelled extents of `maps`, grown by `margin` and clamped.
pub fn pooled_roi(maps: &[&LabelMap], margin: usize) -> Result<RoiBox> {
    let first = maps.first().ok_or_else(|| Error::Empty("no label maps to pool".into()))?;
    let dims = first.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for (n, m) in maps.iter().enumerate() {
        first.require_same_grid(*m, &format!("pooled_roi map {n}"))?;
        let (a, b) = m
            .bounding_box(|c| c != 0)
            .ok_or_else(|| Error::Empty(format!("label map {n} has no labelled voxels")))?;
        for ax in 0..3 {
            lo[ax] = lo[ax].min(a[ax]);
            hi[ax] = hi[ax].max(b[ax]);
        }
    }
    Ok(RoiBox {
        min_index: std::array::from_fn(|a| lo[a].saturating_sub(margin)),
        max_index: std::array::from_fn(|a| (hi[a] + margin).min(dims[a] - 1)),
        grid_dims: dims,
    })
}

/// Centre of mass in continuous voxel indices and in world mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Com {
    pub voxel: [f64; 3],
    pub world: [f64; 3],
}

impl Com {
    pub fn from_voxel(voxel: [f64; 3], geometry: &Geometry) -> Com {
        Com { voxel, world: geometry.index_to_world_point(voxel) }
    }

    pub fn from_world(world: [f64; 3], geometry: &Geometry) -> Com {
        Com { voxel: geometry.world_to_index_point(world), world }
    }
}

/// Unweighted centroid of all nonzero voxels; codes are treated alike.
pub fn compute_com(labels: &LabelMap) -> Result<Com> {
    let g = labels.geometry();
    let [nx, ny, nz] = g.dims();
    let d = labels.data();
    let mut sum = [0u64; 3];
    let mut n = 0u64;
    for k in 0..nz {
        for j in 0..ny {
            let row = &d[nx * (j + ny * k)..nx * (j + ny * k + 1)];
            for (i, &v) in row.iter().enumerate() {
                if v != 0 {
                    sum[0] += i as u64;
                    sum[1] += j as u64;
                    sum[2] += k as u64;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("no labelled voxels for centre of mass".into()));
    }
    Ok(Com::from_voxel(sum.map(|s| s as f64 / n as f64), g))
}

/// Placement of a cropped window inside its source grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiWindow {
    /// Source index of the window's voxel 0; may be negative or overrun.
    pub start: [i64; 3],
    pub shape: [usize; 3],
    /// Continuous centre the window was built around, if any.
    pub com_voxel: Option<[f64; 3]>,
    pub source: Geometry,
}

impl RoiWindow {
    /// Window of `shape` centred at round(com), half-extent floor(shape/2).
    pub fn around(com: &Com, shape: [usize; 3], source: &Geometry) -> RoiWindow {
        RoiWindow {
            start: std::array::from_fn(|a| com.voxel[a].round() as i64 - (shape[a] / 2) as i64),
            shape,
            com_voxel: Some(com.voxel),
            source: source.clone(),
        }
    }

    pub fn from_box(b: &RoiBox, source: &Geometry) -> RoiWindow {
        RoiWindow { start: b.start(), shape: b.shape(), com_voxel: None, source: source.clone() }
    }

    pub fn geometry(&self) -> Result<Geometry> {
        self.source.window(self.start, self.shape)
    }

    fn contains_source_index(&self, idx: [usize; 3]) -> bool {
        (0..3).all(|a| {
            let i = idx[a] as i64;
            i >= self.start[a] && i < self.start[a] + self.shape[a] as i64
        })
    }

    /// True iff every nonzero voxel of `labels` (on the source grid) lies
    /// inside the window.
    pub fn contains_labels(&self, labels: &LabelMap) -> bool {
        match labels.bounding_box(|c| c != 0) {
            None => true,
            Some((lo, hi)) => self.contains_source_index(lo) && self.contains_source_index(hi),
        }
    }
}

/// Copies `window` out of `grid`; voxels outside the source are `T::default()`.
pub fn crop_window<T: Copy + Default>(grid: &Grid<T>, window: &RoiWindow) -> Result<Grid<T>> {
    if let Some(d) = window.source.diff(grid.geometry(), 1e-6) {
        return Err(Error::GeometryMismatch(format!("crop window source: {d}")));
    }
    let geom = window.geometry()?;
    let [sx, sy, sz] = window.shape;
    let mut data = vec![T::default(); geom.len()];
    for k in 0..sz {
        for j in 0..sy {
            for i in 0..sx {
                let src = [
                    window.start[0] + i as i64,
                    window.start[1] + j as i64,
                    window.start[2] + k as i64,
                ];
                if let Some(v) = grid.get_checked(src) {
                    data[i + sx * (j + sy * k)] = v;
                }
            }
        }
    }
    Ok(Grid::from_parts_unchecked(geom, data))
}

/// Crops the window of `shape` centred at `com`.
pub fn crop_roi<T: Copy + Default>(grid: &Grid<T>, com: &Com, shape: [usize; 3]) -> Result<(Grid<T>, RoiWindow)> {
    let window = RoiWindow::around(com, shape, grid.geometry());
    Ok((crop_window(grid, &window)?, window))
}

/// Places ROI labels back at their window on the native grid.
pub fn restore_from_roi(roi_labels: &LabelMap, window: &RoiWindow, native: &Geometry) -> Result<LabelMap> {
    if !geometry_equal(&window.source, native, 1e-6) {
        return Err(Error::GeometryMismatch(format!(
            "window was cut from a different grid: {}",
            window.source.diff(native, 1e-6).unwrap_or_default()
        )));
    }
    roi_labels.require_same_grid(&LabelMap::empty(window.geometry()?), "roi labels vs window")?;
    let [sx, sy, sz] = window.shape;
    let mut out = LabelMap::empty(native.clone()).into_data();
    let src = roi_labels.data();
    for k in 0..sz {
        for j in 0..sy {
            for i in 0..sx {
                let v = src[i + sx * (j + sy * k)];
                if v == 0 {
                    continue;
                }
                let idx = [
                    window.start[0] + i as i64,
                    window.start[1] + j as i64,
                    window.start[2] + k as i64,
                ];
                if native.contains_index(idx) {
                    out[native.linear(idx[0] as usize, idx[1] as usize, idx[2] as usize)] = v;
                }
            }
        }
    }
    Ok(LabelMap::from_parts_unchecked(native.clone(), out))
}

/// Calibrated offset from the brain-mask centroid to the nuclei centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizerModel {
    pub mean_offset_mm: [f64; 3],
    /// Sample standard deviation (n - 1) of the training offsets.
    pub residual_std_mm: [f64; 3],
}

/// Offset (mm) from the mask centroid to the centre of the truth labels.
pub fn centroid_offset(mask: &LabelMap, truth: &LabelMap) -> Result<[f64; 3]> {
    let m = compute_com(mask)?;
    let t = compute_com(truth)?;
    Ok(std::array::from_fn(|a| t.world[a] - m.world[a]))
}

impl LocalizerModel {
    pub fn from_offsets(offsets: &[[f64; 3]]) -> Result<LocalizerModel> {
        if offsets.len() < 2 {
            return Err(Error::Validation(format!(
                "localizer needs at least 2 training subjects, got {}",
                offsets.len()
            )));
        }
        let n = offsets.len() as f64;
        let mean: [f64; 3] = std::array::from_fn(|a| offsets.iter().map(|o| o[a]).sum::<f64>() / n);
        let std = std::array::from_fn(|a| {
            (offsets.iter().map(|o| (o[a] - mean[a]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        });
        Ok(LocalizerModel { mean_offset_mm: mean, residual_std_mm: std })
    }
}

/// Fits the localizer on training subjects with truth labels.
pub fn train_localizer(subjects: &[SubjectRecord]) -> Result<LocalizerModel> {
    let offsets = subjects
        .iter()
        .map(|s| {
            let truth = s
                .truth
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("subject {} has no truth labels", s.id)))?;
            centroid_offset(&s.brain_mask, truth)
        })
        .collect::<Result<Vec<_>>>()?;
    LocalizerModel::from_offsets(&offsets)
}

/// Mask centroid plus the mean offset, clamped into the grid.
pub fn predict_com(model: &LocalizerModel, mask: &LabelMap) -> Result<Com> {
    let c = compute_com(mask)?;
    let g = mask.geometry();
    let world = std::array::from_fn(|a| c.world[a] + model.mean_offset_mm[a]);
    let dims = g.dims();
    let voxel = g.world_to_index_point(world);
    let clamped: [f64; 3] = std::array::from_fn(|a| voxel[a].clamp(0.0, (dims[a] - 1) as f64));
    Ok(Com::from_voxel(clamped, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(dims: [usize; 3], s: f64) -> Geometry {
        Geometry::centered(dims, [s; 3]).unwrap()
    }

    fn points(geom: &Geometry, pts: &[([usize; 3], u8)]) -> LabelMap {
        LabelMap::from_fn(geom.clone(), |p| pts.iter().find(|(q, _)| *q == p).map_or(0, |x| x.1)).unwrap()
    }

    #[test]
    fn pooled_box_examples() {
        let geom = g([32, 32, 32], 1.0);
        let one = points(&geom, &[([5, 5, 5], 1)]);
        assert_eq!(
            pooled_roi(&[&one], 0).unwrap(),
            RoiBox { min_index: [5; 3], max_index: [5; 3], grid_dims: [32; 3] }
        );
        let b = pooled_roi(&[&one], 10).unwrap();
        assert_eq!((b.min_index, b.max_index), ([0; 3], [15; 3]));
        let other = points(&geom, &[([20, 3, 9], 6)]);
        let u = pooled_roi(&[&one, &other], 0).unwrap();
        assert_eq!((u.min_index, u.max_index), ([5, 3, 5], [20, 5, 9]));
        assert!(pooled_roi(&[], 0).is_err());
        assert!(pooled_roi(&[&LabelMap::empty(geom)], 0).is_err());
    }

    #[test]
    fn com_binarizes_codes() {
        let geom = g([4, 4, 4], 1.0);
        let a = points(&geom, &[([0, 0, 0], 1), ([2, 0, 0], 1)]);
        let b = points(&geom, &[([0, 0, 0], 1), ([2, 0, 0], 6)]);
        assert_eq!(compute_com(&a).unwrap().voxel, [1.0, 0.0, 0.0]);
        assert_eq!(compute_com(&b).unwrap().voxel, [1.0, 0.0, 0.0]);
        assert!(compute_com(&LabelMap::empty(geom)).is_err());
    }

    #[test]
    fn com_of_sphere() {
        let geom = g([40, 40, 40], 1.0);
        let c = [17.3, 21.6, 19.0];
        let s = LabelMap::from_fn(geom.clone(), |p| {
            ((0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum::<f64>() <= 64.0) as u8 * 2
        })
        .unwrap();
        let com = compute_com(&s).unwrap();
        for a in 0..3 {
            assert!((com.voxel[a] - c[a]).abs() < 0.1, "{:?}", com.voxel);
        }
    }

    #[test]
    fn window_start_follows_rounding_rule() {
        let geom = g([100, 100, 100], 1.0);
        let com = Com::from_voxel([49.5, 49.5, 49.5], &geom);
        let w = RoiWindow::around(&com, DEFAULT_ROI_SHAPE, &geom);
        // round(49.5) = 50; 50 - [39, 36, 30].
        assert_eq!(w.start, [11, 14, 20]);
        let whole = RoiWindow::around(&Com::from_voxel([49.0; 3], &geom), [100; 3], &geom);
        assert_eq!(whole.start, [-1, -1, -1]);
        let whole = RoiWindow::around(&Com::from_voxel([50.0; 3], &geom), [100; 3], &geom);
        assert_eq!(whole.start, [0, 0, 0]);
    }

    #[test]
    fn crop_whole_and_corner() {
        let geom = g([10, 8, 6], 1.0);
        let vol = crate::volume::Volume::from_fn(geom.clone(), |p| (1 + p[0] + 10 * p[1] + 80 * p[2]) as f32).unwrap();
        let (same, w) = crop_roi(&vol, &Com::from_voxel([5.0, 4.0, 3.0], &geom), [10, 8, 6]).unwrap();
        assert_eq!(w.start, [0, 0, 0]);
        assert_eq!(same.data(), vol.data());
        assert!(geometry_equal(same.geometry(), &geom, 1e-12));

        let (corner, w) = crop_roi(&vol, &Com::from_voxel([0.0; 3], &geom), [4, 4, 4]).unwrap();
        assert_eq!(w.start, [-2, -2, -2]);
        let zeros = corner.data().iter().filter(|v| **v == 0.0).count();
        assert_eq!(zeros, 64 - 8);
        // World position of a kept voxel is preserved.
        let wg = corner.geometry();
        assert_eq!(wg.index_to_world_point([2.0, 2.0, 2.0]), geom.index_to_world_point([0.0; 3]));
        assert_eq!(corner.get(2, 2, 2), vol.get(0, 0, 0));
    }

    #[test]
    fn crop_restore_round_trip() {
        let geom = g([30, 30, 30], 1.0);
        let labels = LabelMap::from_fn(geom.clone(), |p| {
            if p[0] > 10 && p[0] < 18 && p[1] > 12 && p[1] < 16 && p[2] > 5 && p[2] < 25 {
                (p[0] % 6) as u8 + 1
            } else {
                0
            }
        })
        .unwrap();
        let com = compute_com(&labels).unwrap();
        let (roi, w) = crop_roi(&labels, &com, [20, 20, 24]).unwrap();
        assert!(w.contains_labels(&labels));
        assert_eq!(restore_from_roi(&roi, &w, &geom).unwrap(), labels);

        let (small, w) = crop_roi(&labels, &com, [4, 4, 4]).unwrap();
        assert!(!w.contains_labels(&labels));
        let restored = restore_from_roi(&small, &w, &geom).unwrap();
        let expect = LabelMap::from_fn(geom.clone(), |p| {
            let inside = (0..3).all(|a| (p[a] as i64) >= w.start[a] && (p[a] as i64) < w.start[a] + 4);
            if inside { labels.get(p[0], p[1], p[2]) } else { 0 }
        })
        .unwrap();
        assert_eq!(restored, expect);

        let empty = LabelMap::empty(w.geometry().unwrap());
        assert_eq!(restore_from_roi(&empty, &w, &geom).unwrap().count_nonzero(), 0);
        assert!(restore_from_roi(&small, &w, &g([30, 30, 31], 1.0)).is_err());
    }

    #[test]
    fn localizer_statistics() {
        let m = LocalizerModel::from_offsets(&[[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]]).unwrap();
        assert_eq!(m.mean_offset_mm, [3.0, 0.0, 0.0]);
        assert!((m.residual_std_mm[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!(LocalizerModel::from_offsets(&[[1.0; 3]]).is_err());
        let json = serde_json::to_value(&m).unwrap();
        assert!(json.get("mean_offset_mm").is_some() && json.get("residual_std_mm").is_some());
    }

    #[test]
    fn predict_converts_mm_to_voxels() {
        let geom = g([40, 40, 40], 0.5);
        let mask = LabelMap::from_fn(geom.clone(), |p| (p.iter().all(|&v| (10..30).contains(&v))) as u8).unwrap();
        let zero = LocalizerModel { mean_offset_mm: [0.0; 3], residual_std_mm: [0.0; 3] };
        assert_eq!(predict_com(&zero, &mask).unwrap().voxel, [19.5; 3]);
        let off = LocalizerModel { mean_offset_mm: [3.0, 0.0, 0.0], residual_std_mm: [0.0; 3] };
        let p = predict_com(&off, &mask).unwrap();
        assert!((p.voxel[0] - 25.5).abs() < 1e-9 && (p.voxel[1] - 19.5).abs() < 1e-9);
    }
}
