//! Native-space evaluation: Dice, volume, exposed-face surface area, relative
//! volume/surface metrics, signed volume offsets and volume/area regression.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Structure, MAX_LABEL};

/// Dice overlap for one code; both empty counts as perfect agreement.
pub fn dice(a: &LabelMap, b: &LabelMap, code: u8) -> Result<f64> {
    a.require_same_grid(b, "dice")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == code, y == code);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Dice for every structure code, indexed by `code - 1`.
pub fn dice_all(a: &LabelMap, b: &LabelMap) -> Result<[f64; 6]> {
    a.require_same_grid(b, "dice")?;
    let n = MAX_LABEL as usize + 1;
    let mut inter = vec![0usize; n];
    let mut ca = vec![0usize; n];
    let mut cb = vec![0usize; n];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        ca[x as usize] += 1;
        cb[y as usize] += 1;
        if x == y {
            inter[x as usize] += 1;
        }
    }
    Ok(std::array::from_fn(|i| {
        let c = i + 1;
        if ca[c] + cb[c] == 0 {
            1.0
        } else {
            2.0 * inter[c] as f64 / (ca[c] + cb[c]) as f64
        }
    }))
}

pub fn volume(labels: &LabelMap, code: u8) -> f64 {
    labels.count(code) as f64 * labels.geometry().voxel_volume()
}

/// Exposed-face surface area for every code 0..=6 (index = code).
pub fn surface_areas(labels: &LabelMap) -> [f64; 7] {
    let [nx, ny, nz] = labels.dims();
    let sp = labels.geometry().spacing();
    let face = [sp[1] * sp[2], sp[0] * sp[2], sp[0] * sp[1]];
    let d = labels.data();
    let strides = [1usize, nx, nx * ny];
    let dims = [nx, ny, nz];
    let mut faces = [[0usize; 3]; 7];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let c = d[idx];
                if c == 0 {
                    continue;
                }
                let pos = [i, j, k];
                for a in 0..3 {
                    if pos[a] == 0 || d[idx - strides[a]] != c {
                        faces[c as usize][a] += 1;
                    }
                    if pos[a] + 1 == dims[a] || d[idx + strides[a]] != c {
                        faces[c as usize][a] += 1;
                    }
                }
            }
        }
    }
    std::array::from_fn(|c| (0..3).map(|a| faces[c][a] as f64 * face[a]).sum())
}

pub fn surface_area(labels: &LabelMap, code: u8) -> f64 {
    if code == 0 || code > MAX_LABEL {
        return 0.0;
    }
    surface_areas(labels)[code as usize]
}

fn check_pairs(pred: &[f64], manual: &[f64], ids: Option<&[String]>) -> Result<()> {
    if pred.len() != manual.len() {
        return Err(Error::Validation(format!(
            "{} predicted values vs {} manual values",
            pred.len(),
            manual.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("no value pairs".into()));
    }
    if let Some(i) = manual.iter().position(|m| *m == 0.0) {
        let who = ids.and_then(|v| v.get(i)).cloned().unwrap_or_else(|| format!("#{i}"));
        return Err(Error::Validation(format!("manual value is 0 for subject {who}")));
    }
    Ok(())
}

/// Mean of |p - m| / m, in percent.
pub fn relative_abs_pct(pred: &[f64], manual: &[f64], ids: Option<&[String]>) -> Result<f64> {
    check_pairs(pred, manual, ids)?;
    let sum: f64 = pred.iter().zip(manual).map(|(p, m)| (p - m).abs() / m).sum();
    Ok(sum / pred.len() as f64 * 100.0)
}

/// Mean of (p - m) / m, in percent; positive means over-segmentation.
pub fn relative_signed_pct(pred: &[f64], manual: &[f64], ids: Option<&[String]>) -> Result<f64> {
    check_pairs(pred, manual, ids)?;
    let sum: f64 = pred.iter().zip(manual).map(|(p, m)| (p - m) / m).sum();
    Ok(sum / pred.len() as f64 * 100.0)
}

fn paired_values(pred: &[LabelMap], manual: &[LabelMap], f: impl Fn(&LabelMap) -> f64) -> (Vec<f64>, Vec<f64>) {
    (pred.iter().map(&f).collect(), manual.iter().map(&f).collect())
}

/// Volume metric over paired label maps, in percent.
pub fn volume_metric(pred: &[LabelMap], manual: &[LabelMap], code: u8) -> Result<f64> {
    let (p, m) = paired_values(pred, manual, |l| volume(l, code));
    relative_abs_pct(&p, &m, None)
}

/// Surface-area metric over paired label maps, in percent.
pub fn surface_metric(pred: &[LabelMap], manual: &[LabelMap], code: u8) -> Result<f64> {
    let (p, m) = paired_values(pred, manual, |l| surface_area(l, code));
    relative_abs_pct(&p, &m, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedOffsets {
    pub overall: f64,
    pub per_group: BTreeMap<String, f64>,
}

/// Signed volume offsets overall and per group tag (one tag per pair).
pub fn signed_offsets(pred: &[LabelMap], manual: &[LabelMap], code: u8, groups: &[String]) -> Result<SignedOffsets> {
    if groups.len() != pred.len() {
        return Err(Error::Validation("one group tag per pair required".into()));
    }
    let (p, m) = paired_values(pred, manual, |l| volume(l, code));
    let overall = relative_signed_pct(&p, &m, None)?;
    let mut per_group = BTreeMap::new();
    for g in groups.iter().collect::<std::collections::BTreeSet<_>>() {
        let idx: Vec<usize> = (0..groups.len()).filter(|&i| &groups[i] == g).collect();
        let gp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let gm: Vec<f64> = idx.iter().map(|&i| m[i]).collect();
        per_group.insert(g.clone(), relative_signed_pct(&gp, &gm, None)?);
    }
    Ok(SignedOffsets { overall, per_group })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
}

/// Ordinary least squares of area on volume.
pub fn va_regression(points: &[(f64, f64)]) -> Result<LineFit> {
    if points.len() < 2 {
        return Err(Error::Validation(format!("need at least 2 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Validation("all volumes are equal".into()));
    }
    let slope = sxy / sxx;
    Ok(LineFit { slope, intercept: my - slope * mx, n: points.len() })
}

/// One row of `per_structure.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureStats {
    pub subject_id: String,
    pub dataset: String,
    pub method: String,
    pub structure: Structure,
    pub dice: f64,
    pub vol_pred_mm3: f64,
    pub vol_man_mm3: f64,
    pub surf_pred_mm2: f64,
    pub surf_man_mm2: f64,
    /// Empty when the manual volume is 0.
    pub signed_offset_pct: Option<f64>,
}

/// One row of `aggregates.csv`; `group` is `all` or a dataset tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub structure: Structure,
    pub group: String,
    pub n: usize,
    pub dice_mean: f64,
    pub volume_metric_pct: Option<f64>,
    pub surface_metric_pct: Option<f64>,
    pub signed_offset_pct: Option<f64>,
}

/// One row of `va_points.csv`; `source` is `manual` or the method name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaPoint {
    pub subject_id: String,
    pub structure: Structure,
    pub source: String,
    pub volume_mm3: f64,
    pub surface_mm2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaFit {
    pub source: String,
    #[serde(flatten)]
    pub fit: LineFit,
}

/// A subject-scoped warning carried through to the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectFlag {
    pub subject_id: String,
    pub kind: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub rows: Vec<StructureStats>,
    pub aggregates: Vec<Aggregate>,
    pub va_points: Vec<VaPoint>,
    pub fits: Vec<VaFit>,
    #[serde(default)]
    pub flags: Vec<SubjectFlag>,
}

/// A prediction paired with its manual truth, both in native space.
pub struct EvalCase<'a> {
    pub subject_id: &'a str,
    pub dataset: &'a str,
    pub pred: &'a LabelMap,
    pub truth: &'a LabelMap,
}

fn subject_rows(method: &str, case: &EvalCase) -> Result<Vec<StructureStats>> {
    let d = dice_all(case.pred, case.truth)?;
    let sp = surface_areas(case.pred);
    let sm = surface_areas(case.truth);
    Ok(Structure::ALL
        .iter()
        .map(|&s| {
            let c = s.code();
            let vp = volume(case.pred, c);
            let vm = volume(case.truth, c);
            StructureStats {
                subject_id: case.subject_id.to_string(),
                dataset: case.dataset.to_string(),
                method: method.to_string(),
                structure: s,
                dice: d[c as usize - 1],
                vol_pred_mm3: vp,
                vol_man_mm3: vm,
                surf_pred_mm2: sp[c as usize],
                surf_man_mm2: sm[c as usize],
                signed_offset_pct: (vm != 0.0).then(|| (vp - vm) / vm * 100.0),
            }
        })
        .collect())
}

/// Per-structure aggregates over `rows`, for the whole set and per dataset.
pub fn aggregate_rows(rows: &[StructureStats]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    let mut datasets: Vec<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    datasets.sort_unstable();
    datasets.dedup();
    for method in methods {
        for s in Structure::ALL {
            let groups = std::iter::once(None).chain(datasets.iter().map(|d| Some(*d)));
            for group in groups {
                let sel: Vec<&StructureStats> = rows
                    .iter()
                    .filter(|r| r.method == method && r.structure == s && group.is_none_or(|g| r.dataset == g))
                    .collect();
                if sel.is_empty() {
                    continue;
                }
                let n = sel.len();
                let vp: Vec<f64> = sel.iter().map(|r| r.vol_pred_mm3).collect();
                let vm: Vec<f64> = sel.iter().map(|r| r.vol_man_mm3).collect();
                let sp: Vec<f64> = sel.iter().map(|r| r.surf_pred_mm2).collect();
                let sm: Vec<f64> = sel.iter().map(|r| r.surf_man_mm2).collect();
                out.push(Aggregate {
                    method: method.to_string(),
                    structure: s,
                    group: group.unwrap_or("all").to_string(),
                    n,
                    dice_mean: sel.iter().map(|r| r.dice).sum::<f64>() / n as f64,
                    volume_metric_pct: relative_abs_pct(&vp, &vm, None).ok(),
                    surface_metric_pct: relative_abs_pct(&sp, &sm, None).ok(),
                    signed_offset_pct: relative_signed_pct(&vp, &vm, None).ok(),
                });
            }
        }
    }
    out
}

fn va_from_rows(rows: &[StructureStats]) -> Vec<VaPoint> {
    let mut pts = Vec::new();
    for r in rows {
        pts.push(VaPoint {
            subject_id: r.subject_id.clone(),
            structure: r.structure,
            source: "manual".into(),
            volume_mm3: r.vol_man_mm3,
            surface_mm2: r.surf_man_mm2,
        });
    }
    for r in rows {
        pts.push(VaPoint {
            subject_id: r.subject_id.clone(),
            structure: r.structure,
            source: r.method.clone(),
            volume_mm3: r.vol_pred_mm3,
            surface_mm2: r.surf_pred_mm2,
        });
    }
    pts
}

/// Line fits per source over every V/A point of that source; sources whose
/// points are degenerate are skipped.
pub fn fit_sources(points: &[VaPoint]) -> Vec<VaFit> {
    let mut sources: Vec<&str> = points.iter().map(|p| p.source.as_str()).collect();
    sources.sort_unstable();
    sources.dedup();
    sources
        .into_iter()
        .filter_map(|src| {
            let xy: Vec<(f64, f64)> = points
                .iter()
                .filter(|p| p.source == src)
                .map(|p| (p.volume_mm3, p.surface_mm2))
                .collect();
            va_regression(&xy).ok().map(|fit| VaFit { source: src.to_string(), fit })
        })
        .collect()
}

impl EvalReport {
    /// Evaluates every case; rows are ordered by subject id, then code.
    pub fn build(method: &str, cases: &[EvalCase]) -> Result<EvalReport> {
        if cases.is_empty() {
            return Err(Error::Empty("no subjects to evaluate".into()));
        }
        let per: Vec<Result<Vec<StructureStats>>> = cases.par_iter().map(|c| subject_rows(method, c)).collect();
        let mut rows = Vec::new();
        for (c, r) in cases.iter().zip(per) {
            rows.extend(r.map_err(|e| e.in_stage("evaluate", c.subject_id))?);
        }
        Ok(Self::from_rows(method, rows))
    }

    /// Rebuilds aggregates, V/A points and fits from per-structure rows.
    pub fn from_rows(method: &str, mut rows: Vec<StructureStats>) -> EvalReport {
        rows.sort_by(|a, b| (&a.subject_id, a.structure).cmp(&(&b.subject_id, b.structure)));
        let aggregates = aggregate_rows(&rows);
        let va_points = va_from_rows(&rows);
        let fits = fit_sources(&va_points);
        EvalReport { method: method.to_string(), rows, aggregates, va_points, fits, flags: Vec::new() }
    }

    pub fn subject_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.rows.iter().map(|r| r.subject_id.clone()).collect();
        ids.dedup();
        ids
    }

    pub fn aggregate(&self, structure: Structure, group: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.structure == structure && a.group == group)
    }

    /// Mean Dice over all rows.
    pub fn mean_dice(&self) -> f64 {
        self.rows.iter().map(|r| r.dice).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const PER_STRUCTURE_CSV: &str = "per_structure.csv";
pub const AGGREGATES_CSV: &str = "aggregates.csv";
pub const VA_POINTS_CSV: &str = "va_points.csv";
pub const REPORT_JSON: &str = "report.json";

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `per_structure.csv`, `aggregates.csv`, `va_points.csv` and
/// `report.json` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::Empty("report has no rows".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join(PER_STRUCTURE_CSV), &report.rows)?;
    write_csv(&dir.join(AGGREGATES_CSV), &report.aggregates)?;
    write_csv(&dir.join(VA_POINTS_CSV), &report.va_points)?;
    let path = dir.join(REPORT_JSON);
    std::fs::write(&path, report.to_json()?).map_err(|e| Error::io(&path, e))
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn grid(dims: [usize; 3], spacing: f64) -> Geometry {
        Geometry::centered(dims, [spacing; 3]).unwrap()
    }

    fn cube(g: &Geometry, lo: [usize; 3], hi: [usize; 3], code: u8) -> LabelMap {
        LabelMap::from_fn(g.clone(), |p| {
            ((0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]) as u8) * code
        })
        .unwrap()
    }

    #[test]
    fn dice_examples() {
        let g = grid([6, 6, 6], 1.0);
        let a = cube(&g, [1, 1, 1], [2, 2, 2], 3);
        let b = cube(&g, [2, 1, 1], [3, 2, 2], 3);
        assert_eq!(dice(&a, &a, 3).unwrap(), 1.0);
        assert_eq!(dice(&a, &b, 3).unwrap(), 0.5);
        assert_eq!(dice(&b, &a, 3).unwrap(), 0.5);
        let c = cube(&g, [4, 4, 4], [5, 5, 5], 3);
        assert_eq!(dice(&a, &c, 3).unwrap(), 0.0);
        assert_eq!(dice(&a, &a, 5).unwrap(), 1.0);
        assert_eq!(dice_all(&a, &b).unwrap()[2], 0.5);
        assert!(dice(&a, &LabelMap::empty(grid([6, 6, 7], 1.0)), 3).is_err());
    }

    #[test]
    fn volume_and_surface_examples() {
        let g = grid([8, 8, 8], 0.5);
        let one = cube(&g, [3, 3, 3], [3, 3, 3], 1);
        assert_eq!(surface_area(&one, 1), 1.5);
        let two = cube(&g, [3, 3, 3], [4, 3, 3], 1);
        assert_eq!(surface_area(&two, 1), 2.5);
        assert_eq!(surface_area(&LabelMap::empty(g.clone()), 1), 0.0);
        let hundred = LabelMap::from_fn(g.clone(), |p| (p[0] + 8 * (p[1] + 8 * p[2]) < 100) as u8 * 2).unwrap();
        assert_eq!(volume(&hundred, 2), 12.5);
        assert_eq!(volume(&hundred, 1), 0.0);
        // Grid boundary counts as exposed.
        let g1 = grid([1, 1, 1], 1.0);
        assert_eq!(surface_area(&LabelMap::new(g1, vec![4]).unwrap(), 4), 6.0);
    }

    #[test]
    fn relative_metrics() {
        let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
        assert!(close(relative_abs_pct(&[90.0], &[100.0], None).unwrap(), 10.0));
        assert!(close(relative_abs_pct(&[90.0, 120.0], &[100.0, 100.0], None).unwrap(), 15.0));
        assert!(close(relative_signed_pct(&[90.0, 120.0], &[100.0, 100.0], None).unwrap(), 5.0));
        assert!(close(relative_abs_pct(&[50.0], &[40.0], None).unwrap(), 25.0));
        assert_eq!(relative_abs_pct(&[7.0, 3.0], &[7.0, 3.0], None).unwrap(), 0.0);
        let ids = vec!["a".to_string(), "b".to_string()];
        let err = relative_abs_pct(&[1.0, 1.0], &[1.0, 0.0], Some(&ids)).unwrap_err();
        assert!(err.to_string().contains("subject b"), "{err}");
        assert!(relative_abs_pct(&[], &[], None).is_err());
    }

    #[test]
    fn signed_offsets_by_group() {
        let g = grid([10, 10, 10], 1.0);
        let m = cube(&g, [0, 0, 0], [4, 4, 3], 1); // 100 voxels
        let p1 = LabelMap::from_fn(g.clone(), |p| (m.get(p[0], p[1], p[2]) == 1 && p[0] + 5 * (p[1] + 5 * p[2]) < 90) as u8).unwrap();
        let p2 = LabelMap::from_fn(g.clone(), |p| (m.get(p[0], p[1], p[2]) == 1 || (p[2] == 4 && p[1] < 4 && p[0] < 5)) as u8).unwrap();
        assert_eq!(volume(&p1, 1), 90.0);
        assert_eq!(volume(&p2, 1), 120.0);
        let groups = vec!["x".to_string(), "y".to_string()];
        let s = signed_offsets(&[p1.clone(), p2.clone()], &[m.clone(), m.clone()], 1, &groups).unwrap();
        assert!((s.overall - 5.0).abs() < 1e-12);
        assert!((s.per_group["x"] + 10.0).abs() < 1e-12);
        assert!((s.per_group["y"] - 20.0).abs() < 1e-12);
        assert!((volume_metric(&[p1, p2], &[m.clone(), m], 1).unwrap() - 15.0).abs() < 1e-12);
    }

    #[test]
    fn regression_collinear_and_degenerate() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect();
        let f = va_regression(&pts).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!(va_regression(&[(1.0, 2.0), (1.0, 3.0)]).is_err());
        assert!(va_regression(&[(1.0, 2.0)]).is_err());
    }

    #[test]
    fn report_rows_and_csv_round_trip() {
        let g = grid([12, 12, 12], 0.5);
        let truth = LabelMap::from_fn(g.clone(), |p| {
            let c = (p[0] / 4) as u8 + 3 * (p[1] >= 6) as u8 + 1;
            if p[2] >= 4 && p[2] < 8 + (c as usize % 3) { c } else { 0 }
        })
        .unwrap();
        let pred = LabelMap::from_fn(g.clone(), |p| if p[2] == 4 { 0 } else { truth.get(p[0], p[1], p[2]) }).unwrap();
        let ids: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
        let cases: Vec<EvalCase> = ids
            .iter()
            .map(|id| EvalCase { subject_id: id, dataset: "synth_a", pred: &pred, truth: &truth })
            .collect();
        let report = EvalReport::build("method1", &cases).unwrap();
        assert_eq!(report.rows.len(), 18);
        let dir = tempfile::tempdir().unwrap();
        emit_report(&report, dir.path()).unwrap();
        let rows: Vec<StructureStats> = read_csv(&dir.path().join(PER_STRUCTURE_CSV)).unwrap();
        assert_eq!(rows, report.rows);
        let agg: Vec<Aggregate> = read_csv(&dir.path().join(AGGREGATES_CSV)).unwrap();
        let again = aggregate_rows(&rows);
        assert_eq!(agg.len(), again.len());
        for (a, b) in agg.iter().zip(&again) {
            assert!((a.dice_mean - b.dice_mean).abs() < 1e-9);
            assert!((a.volume_metric_pct.unwrap() - b.volume_metric_pct.unwrap()).abs() < 1e-9);
        }
        let header = std::fs::read_to_string(dir.path().join(PER_STRUCTURE_CSV)).unwrap();
        assert!(header.starts_with(
            "subject_id,dataset,method,structure,dice,vol_pred_mm3,vol_man_mm3,surf_pred_mm2,surf_man_mm2,signed_offset_pct\n"
        ));
        let va = std::fs::read_to_string(dir.path().join(VA_POINTS_CSV)).unwrap();
        assert!(va.starts_with("subject_id,structure,source,volume_mm3,surface_mm2\n"));
        assert_eq!(load_report(&dir.path().join(REPORT_JSON)).unwrap(), report);
        let empty = EvalReport { rows: vec![], ..report };
        assert!(emit_report(&empty, dir.path()).is_err());
    }
}
