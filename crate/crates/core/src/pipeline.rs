//! Orchestration of both pipelines: configuration, run manifests, output
//! files and method comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluate::{emit_report, EvalCase, EvalReport, SubjectFlag};
use crate::nifti::{load_labels, load_volume, save_volume};
use crate::phantom::{load_cohort, Split};
use crate::preprocess::{
    apply_brain_mask, augment, merge_echoes, pad_offset, pad_to_shape, standardize_histogram, train_landmarks,
    AugmentBounds, LandmarkTable, DEFAULT_PERCENTILES,
};
use crate::registration::{register_affine, RegistrationParams};
use crate::roi::{
    centroid_offset, compute_com, crop_window, pooled_roi, predict_com, restore_from_roi, LocalizerModel, RoiBox,
    RoiWindow, DEFAULT_ROI_MARGIN, DEFAULT_ROI_SHAPE,
};
use crate::segment::{
    export_training_set, write_predictions, AtlasModel, ExchangeCase, ExternalPredictions, Segmenter, SegmenterInput,
};
use crate::volume::{Geometry, LabelMap, RawSubject, Structure, SubjectRecord, TransformEntry, Volume};
use crate::xform::{apply_inverse_chain, resample_image, resample_labels, smooth_labels, AffineTransform, SmoothingSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Method1,
    Method2,
}

pub const METHOD1_STAGES: [&str; 12] = [
    "merge_echoes",
    "apply_brain_mask",
    "register_t2_to_t1",
    "register_t1_to_template",
    "transform_labels",
    "roi_crop",
    "histogram_standardization",
    "augment",
    "segment",
    "inverse_transform",
    "gaussian_smoothing",
    "evaluate",
];

pub const METHOD2_STAGES: [&str; 11] = [
    "merge_echoes",
    "apply_brain_mask",
    "histogram_standardization",
    "pad",
    "augment",
    "train_localizer",
    "predict_com",
    "roi_crop",
    "segment",
    "restore_native",
    "evaluate",
];

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Method1 => "method1",
            Method::Method2 => "method2",
        }
    }

    /// Stage sequence recorded in the manifest.
    pub fn stages(self, smoothing: bool) -> Vec<String> {
        match self {
            Method::Method1 => METHOD1_STAGES
                .iter()
                .filter(|s| smoothing || **s != "gaussian_smoothing")
                .map(|s| s.to_string())
                .collect(),
            Method::Method2 => METHOD2_STAGES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn default_augmentation(self) -> AugmentBounds {
        match self {
            Method::Method1 => AugmentBounds::method1(),
            Method::Method2 => AugmentBounds::method2(),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "method1" => Ok(Method::Method1),
            "method2" => Ok(Method::Method2),
            other => Err(Error::Config(format!("unknown method `{other}` (expected method1 or method2)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Cohort directory holding `cohort.json`.
    pub cohort: Option<PathBuf>,
    /// Template T1 image (Method I).
    pub template: Option<PathBuf>,
    /// Optional brain mask applied to the template before registration.
    pub template_mask: Option<PathBuf>,
    pub work_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentPreset {
    Method1,
    Method2,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Defaults to the preset of the configured method.
    pub preset: Option<AugmentPreset>,
    /// Explicit bounds; override the preset.
    pub bounds: Option<AugmentBounds>,
    /// Augmented copies per training subject.
    pub copies: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { preset: None, bounds: None, copies: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiConfig {
    /// Method II window, voxels.
    pub shape: [usize; 3],
    /// Method I margin around the pooled label box, voxels.
    pub margin: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig { shape: DEFAULT_ROI_SHAPE, margin: DEFAULT_ROI_MARGIN }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    pub enabled: bool,
    pub sigma_voxels: f64,
    pub threshold: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig { enabled: true, sigma_voxels: 1.0, threshold: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmenterKind {
    Atlas,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub kind: SegmenterKind,
    /// Directory of `<id>.nii.gz` ROI predictions for `kind = "external"`.
    pub predictions: Option<PathBuf>,
    /// Atlas-to-subject registration.
    pub registration: RegistrationParams,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig { kind: SegmenterKind::Atlas, predictions: None, registration: RegistrationParams::msd() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramConfig {
    pub percentiles: Vec<f64>,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        HistogramConfig { percentiles: DEFAULT_PERCENTILES.to_vec() }
    }
}

/// Everything a run needs; loaded from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub method: Method,
    pub seed: u64,
    /// Subjects processed concurrently. Results do not depend on it.
    pub workers: usize,
    pub paths: PathsConfig,
    /// Subject registrations of Method I.
    pub registration: RegistrationParams,
    pub augmentation: AugmentConfig,
    pub roi: RoiConfig,
    /// Method I label smoothing after the inverse transform.
    pub smoothing: SmoothingConfig,
    pub segmenter: SegmenterConfig,
    /// Method I normalizes after registration, inside the template ROI.
    pub histogram: HistogramConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            method: Method::Method1,
            seed: 0,
            workers: 1,
            paths: PathsConfig::default(),
            registration: RegistrationParams::default(),
            augmentation: AugmentConfig::default(),
            roi: RoiConfig::default(),
            smoothing: SmoothingConfig::default(),
            segmenter: SegmenterConfig::default(),
            histogram: HistogramConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p.as_mut().filter(|v| v.is_relative()) {
                *v = base.join(&*v);
            }
        };
        fix(&mut cfg.paths.cohort);
        fix(&mut cfg.paths.template);
        fix(&mut cfg.paths.template_mask);
        fix(&mut cfg.paths.work_dir);
        fix(&mut cfg.segmenter.predictions);
        Ok(cfg)
    }

    pub fn augment_bounds(&self) -> AugmentBounds {
        if let Some(b) = &self.augmentation.bounds {
            return b.clone();
        }
        match self.augmentation.preset {
            Some(AugmentPreset::Method1) => AugmentBounds::method1(),
            Some(AugmentPreset::Method2) => AugmentBounds::method2(),
            Some(AugmentPreset::None) => AugmentBounds::none(),
            None => self.method.default_augmentation(),
        }
    }

    /// Checks values that do not touch the file system.
    pub fn validate_settings(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.registration.validate().map_err(cfg_err)?;
        self.segmenter.registration.validate().map_err(cfg_err)?;
        self.augment_bounds().validate().map_err(cfg_err)?;
        if self.roi.shape.contains(&0) {
            return Err(Error::Config(format!("roi.shape must be positive, got {:?}", self.roi.shape)));
        }
        if self.smoothing.enabled {
            SmoothingSpec::new([self.smoothing.sigma_voxels; 3], self.smoothing.threshold).map_err(cfg_err)?;
        }
        let p = &self.histogram.percentiles;
        LandmarkTable::new(p.clone(), (0..p.len()).map(|i| i as f64).collect()).map_err(cfg_err)?;
        if self.segmenter.kind == SegmenterKind::External && self.segmenter.predictions.is_none() {
            return Err(Error::Config("segmenter.kind = \"external\" needs segmenter.predictions".into()));
        }
        Ok(())
    }

    /// Full validation, including that referenced paths exist.
    pub fn validate(&self) -> Result<()> {
        self.validate_settings()?;
        if self.method == Method::Method1 && self.paths.template.is_none() {
            return Err(Error::Config("method1 needs paths.template".into()));
        }
        let Some(cohort) = &self.paths.cohort else {
            return Err(Error::Config("paths.cohort is required".into()));
        };
        let mut required = vec![("paths.cohort", cohort)];
        if self.method == Method::Method1 {
            required.extend(self.paths.template.iter().map(|p| ("paths.template", p)));
            required.extend(self.paths.template_mask.iter().map(|p| ("paths.template_mask", p)));
        }
        if self.segmenter.kind == SegmenterKind::External {
            required.extend(self.segmenter.predictions.iter().map(|p| ("segmenter.predictions", p)));
        }
        for (key, p) in required {
            if !p.exists() {
                return Err(Error::Config(format!("{key}: {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn sha256(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(serde_json::to_vec(self)?)))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed for one (subject, stage, ...) tuple, derived from the run seed.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update(b"/");
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Template image for Method I.
#[derive(Clone, Debug)]
pub struct TemplateImage {
    pub t1: Volume,
    pub mask: Option<LabelMap>,
}

/// Subjects and template for an in-memory run.
#[derive(Clone, Debug, Default)]
pub struct PipelineInputs {
    pub train: Vec<RawSubject>,
    pub test: Vec<RawSubject>,
    pub template: Option<TemplateImage>,
}

/// Loads the cohort and (for Method I) the template named by `config`.
pub fn load_inputs(config: &PipelineConfig) -> Result<PipelineInputs> {
    let dir = config.paths.cohort.as_ref().ok_or_else(|| Error::Config("paths.cohort is required".into()))?;
    let cohort = load_cohort(dir)?;
    let template = match (config.method, &config.paths.template) {
        (Method::Method1, Some(t)) => Some(TemplateImage {
            t1: load_volume(t)?,
            mask: config.paths.template_mask.as_ref().map(load_labels).transpose()?,
        }),
        _ => None,
    };
    Ok(PipelineInputs { train: cohort.train, test: cohort.test, template })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub copy: usize,
    pub seed: u64,
    pub transform: AffineTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectManifest {
    pub id: String,
    pub dataset: String,
    pub split: Split,
    /// Geometric transforms in application order (native to segmentation space).
    pub transforms: Vec<TransformEntry>,
    /// Final similarity per registration stage.
    pub similarity: BTreeMap<String, f64>,
    pub augmentations: Vec<AugmentRecord>,
    pub roi_window: Option<RoiWindow>,
    pub com_mm: Option<[f64; 3]>,
    /// Whether the truth labels fit in the ROI window (test subjects).
    pub contained: Option<bool>,
}

impl SubjectManifest {
    fn new(id: &str, dataset: &str, split: Split) -> Self {
        SubjectManifest {
            id: id.to_string(),
            dataset: dataset.to_string(),
            split,
            transforms: Vec::new(),
            similarity: BTreeMap::new(),
            augmentations: Vec::new(),
            roi_window: None,
            com_mm: None,
            contained: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: Method,
    pub config_sha256: String,
    pub config: PipelineConfig,
    pub seed: u64,
    pub stages: Vec<String>,
    pub segmenter: String,
    pub atlas_id: Option<String>,
    pub augment_bounds: AugmentBounds,
    pub roi_box: Option<RoiBox>,
    pub pad_dims: Option<[usize; 3]>,
    pub landmarks_t1: LandmarkTable,
    pub landmarks_t2: LandmarkTable,
    pub localizer: Option<LocalizerModel>,
    pub subjects: Vec<SubjectManifest>,
    pub flags: Vec<SubjectFlag>,
}

pub const MANIFEST_JSON: &str = "manifest.json";

/// Images of one subject on its segmentation grid.
#[derive(Clone, Debug)]
pub struct RoiCase {
    pub id: String,
    pub t1: Volume,
    pub t2: Volume,
    pub labels: Option<LabelMap>,
}

impl RoiCase {
    fn exchange(&self) -> ExchangeCase {
        ExchangeCase { id: self.id.clone(), t1: self.t1.clone(), t2: self.t2.clone(), labels: self.labels.clone() }
    }
}

/// How a segmentation-space prediction returns to the native T2 grid.
#[derive(Clone, Debug)]
pub enum Restore {
    /// Method I: single composed inverse of the registration chain.
    InverseChain { chain: Vec<AffineTransform>, native: Geometry },
    /// Method II: back into the padded grid, then cut the native extent out.
    Window { window: RoiWindow, unpad: RoiWindow, native: Geometry },
}

impl Restore {
    pub fn native(&self) -> &Geometry {
        match self {
            Restore::InverseChain { native, .. } | Restore::Window { native, .. } => native,
        }
    }

    pub fn apply(&self, roi_labels: &LabelMap) -> Result<LabelMap> {
        match self {
            Restore::InverseChain { chain, native } => apply_inverse_chain(roi_labels, chain, native),
            Restore::Window { window, unpad, native } => {
                let padded = restore_from_roi(roi_labels, window, &window.source)?;
                crop_window(&padded, unpad)?.with_geometry(native.clone())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TestCase {
    pub dataset: String,
    pub roi: RoiCase,
    pub restore: Restore,
    /// Native truth, if known.
    pub truth: Option<LabelMap>,
}

/// Result of all stages before segmentation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub method: Method,
    /// Unaugmented training cases, sorted by id.
    pub train: Vec<RoiCase>,
    /// Augmented copies, ids `<id>_aug<k>`.
    pub augmented: Vec<RoiCase>,
    pub test: Vec<TestCase>,
    pub manifest: RunManifest,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: EvalReport,
    pub manifest: RunManifest,
    /// Native-space predictions by subject id.
    pub predictions: Vec<(String, LabelMap)>,
}

struct Native {
    id: String,
    dataset: String,
    t1: Volume,
    t2: Volume,
    mask: LabelMap,
    truth: Option<LabelMap>,
}

fn native(raw: RawSubject) -> Result<Native> {
    let id = raw.id.clone();
    let t2 = merge_echoes(&raw.t2_echoes).map_err(|e| e.in_stage("merge_echoes", &id))?;
    let masked = || -> Result<(Volume, Volume)> {
        let rec = SubjectRecord {
            id: raw.id.clone(),
            dataset: raw.dataset.clone(),
            t1: raw.t1.clone(),
            t2: t2.clone(),
            brain_mask: raw.brain_mask.clone(),
            truth: raw.truth.clone(),
            transform_log: Vec::new(),
        };
        rec.validate()?;
        Ok((apply_brain_mask(&rec.t1, &rec.brain_mask)?, apply_brain_mask(&rec.t2, &rec.brain_mask)?))
    };
    let (t1, t2) = masked().map_err(|e| e.in_stage("apply_brain_mask", &id))?;
    Ok(Native { id, dataset: raw.dataset, t1, t2, mask: raw.brain_mask, truth: raw.truth })
}

fn check_inputs(inputs: &PipelineInputs) -> Result<()> {
    if inputs.train.is_empty() {
        return Err(Error::Validation("no training subjects".into()));
    }
    if inputs.test.is_empty() {
        return Err(Error::Validation("no test subjects".into()));
    }
    let mut ids: Vec<&str> = inputs.train.iter().chain(&inputs.test).map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Validation(format!("duplicate subject id {}", w[0])));
    }
    if let Some(s) = inputs.train.iter().find(|s| s.truth.is_none()) {
        return Err(Error::Validation(format!("training subject {} has no truth labels", s.id)));
    }
    Ok(())
}

fn sorted(mut v: Vec<RawSubject>) -> Vec<RawSubject> {
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

/// Keeps a test subject's result, or turns a runtime failure into a flag.
fn keep_or_flag<T>(r: Result<T>, id: &str, flags: &mut Vec<SubjectFlag>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_validation() => Err(e),
        Err(e) => {
            flags.push(SubjectFlag { subject_id: id.to_string(), kind: "failed".into(), detail: e.to_string() });
            Ok(None)
        }
    }
}

fn landmarks(cases: &[(&Volume, &LabelMap)], percentiles: &[f64]) -> Result<LandmarkTable> {
    let (v, m): (Vec<&Volume>, Vec<&LabelMap>) = cases.iter().copied().unzip();
    train_landmarks(&v, &m, percentiles)
}

fn augment_copies(
    rec: &SubjectRecord,
    config: &PipelineConfig,
    bounds: &AugmentBounds,
    mut crop: impl FnMut(SubjectRecord) -> Result<RoiCase>,
) -> Result<(Vec<RoiCase>, Vec<AugmentRecord>)> {
    let mut cases = Vec::new();
    let mut records = Vec::new();
    for copy in 0..config.augmentation.copies {
        let seed = derive_seed(config.seed, &[&rec.id, "augment", &copy.to_string()]);
        let mut aug = augment(rec, bounds, seed)?;
        let transform = aug.transform_log.last().expect("augment logs its pose").transform.clone();
        aug.id = format!("{}_aug{copy}", rec.id);
        cases.push(crop(aug)?);
        records.push(AugmentRecord { copy, seed, transform });
    }
    Ok((cases, records))
}

fn base_manifest(config: &PipelineConfig, t1: LandmarkTable, t2: LandmarkTable) -> Result<RunManifest> {
    Ok(RunManifest {
        method: config.method,
        config_sha256: config.sha256()?,
        config: config.clone(),
        seed: config.seed,
        stages: config.method.stages(config.smoothing.enabled),
        segmenter: match config.segmenter.kind {
            SegmenterKind::Atlas => "atlas".into(),
            SegmenterKind::External => "external".into(),
        },
        atlas_id: None,
        augment_bounds: config.augment_bounds(),
        roi_box: None,
        pad_dims: None,
        landmarks_t1: t1,
        landmarks_t2: t2,
        localizer: None,
        subjects: Vec::new(),
        flags: Vec::new(),
    })
}

struct Registered {
    native: Native,
    t21: AffineTransform,
    t1m: AffineTransform,
    similarity: BTreeMap<String, f64>,
    labels_tpl: Option<LabelMap>,
}

fn register_method1(n: Native, template: &Volume, config: &PipelineConfig, train: bool) -> Result<Registered> {
    let r21 = register_affine(&n.t1, &n.t2, &config.registration).map_err(|e| e.in_stage("register_t2_to_t1", &n.id))?;
    let r1m =
        register_affine(template, &n.t1, &config.registration).map_err(|e| e.in_stage("register_t1_to_template", &n.id))?;
    let to_tpl = r1m.transform.compose(&r21.transform);
    let labels_tpl = match (&n.truth, train) {
        (Some(t), true) => Some(
            resample_labels(t, &to_tpl, template.geometry()).map_err(|e| e.in_stage("transform_labels", &n.id))?,
        ),
        _ => None,
    };
    let similarity = BTreeMap::from([
        ("register_t2_to_t1".to_string(), r21.final_similarity),
        ("register_t1_to_template".to_string(), r1m.final_similarity),
    ]);
    Ok(Registered { native: n, t21: r21.transform, t1m: r1m.transform, similarity, labels_tpl })
}

struct Cropped {
    reg: Registered,
    t1: Volume,
    t2: Volume,
    mask: LabelMap,
    labels: Option<LabelMap>,
}

fn crop_method1(reg: Registered, window: &RoiWindow) -> Result<Cropped> {
    let g = window.geometry()?;
    let to_tpl = reg.t1m.compose(&reg.t21);
    let n = &reg.native;
    let t1 = resample_image(&n.t1, &reg.t1m, &g)?;
    let t2 = resample_image(&n.t2, &to_tpl, &g)?;
    let mask = resample_labels(&n.mask, &reg.t1m, &g)?;
    let labels = reg.labels_tpl.as_ref().map(|l| crop_window(l, window)).transpose()?;
    Ok(Cropped { reg, t1, t2, mask, labels })
}

/// Method I up to segmentation: merge, mask, T2 to T1 and T1 to template
/// registration, pooled template ROI, standardization and augmentation.
pub fn prepare_method1(inputs: PipelineInputs, config: &PipelineConfig) -> Result<Prepared> {
    let template = inputs
        .template
        .as_ref()
        .ok_or_else(|| Error::Config("method1 needs a template image".into()))?;
    check_inputs(&inputs)?;
    let template_t1 = match &template.mask {
        Some(m) => apply_brain_mask(&template.t1, m)?,
        None => template.t1.clone(),
    };
    let mut flags = Vec::new();
    let train_raw = sorted(inputs.train);
    let test_raw = sorted(inputs.test);

    let train: Vec<Registered> = train_raw
        .into_par_iter()
        .map(|r| register_method1(native(r)?, &template_t1, config, true))
        .collect::<Result<_>>()?;
    let test_results: Vec<(String, Result<Registered>)> = test_raw
        .into_par_iter()
        .map(|r| {
            let id = r.id.clone();
            (id, native(r).and_then(|n| register_method1(n, &template_t1, config, false)))
        })
        .collect();
    let mut test = Vec::new();
    for (id, r) in test_results {
        test.extend(keep_or_flag(r, &id, &mut flags)?);
    }

    let maps: Vec<&LabelMap> = train.iter().filter_map(|r| r.labels_tpl.as_ref()).collect();
    let roi_box = pooled_roi(&maps, config.roi.margin).map_err(|e| e.in_stage("roi_crop", "pooled"))?;
    let window = RoiWindow::from_box(&roi_box, template_t1.geometry());

    let train: Vec<Cropped> = train
        .into_par_iter()
        .map(|r| {
            let id = r.native.id.clone();
            crop_method1(r, &window).map_err(|e| e.in_stage("roi_crop", &id))
        })
        .collect::<Result<_>>()?;
    let test_results: Vec<(String, Result<Cropped>)> = test
        .into_par_iter()
        .map(|r| (r.native.id.clone(), crop_method1(r, &window)))
        .collect();
    let mut test = Vec::new();
    for (id, r) in test_results {
        test.extend(keep_or_flag(r.map_err(|e| e.in_stage("roi_crop", &id)), &id, &mut flags)?);
    }

    let pct = &config.histogram.percentiles;
    let stage = |e: Error| e.in_stage("histogram_standardization", "training set");
    let lm1 = landmarks(&train.iter().map(|c| (&c.t1, &c.mask)).collect::<Vec<_>>(), pct).map_err(stage)?;
    let lm2 = landmarks(&train.iter().map(|c| (&c.t2, &c.mask)).collect::<Vec<_>>(), pct).map_err(stage)?;
    let standardize = |c: &mut Cropped| -> Result<()> {
        c.t1 = standardize_histogram(&c.t1, &c.mask, &lm1)?;
        c.t2 = standardize_histogram(&c.t2, &c.mask, &lm2)?;
        Ok(())
    };
    let mut train = train;
    train
        .par_iter_mut()
        .map(|c| standardize(c).map_err(|e| e.in_stage("histogram_standardization", &c.reg.native.id)))
        .collect::<Result<Vec<()>>>()?;
    let std_results: Vec<Result<()>> = test
        .par_iter_mut()
        .map(|c| standardize(c).map_err(|e| e.in_stage("histogram_standardization", &c.reg.native.id)))
        .collect();
    let mut kept = Vec::new();
    for (c, r) in test.into_iter().zip(std_results) {
        let id = c.reg.native.id.clone();
        if keep_or_flag(r, &id, &mut flags)?.is_some() {
            kept.push(c);
        }
    }
    let test = kept;

    let mut manifest = base_manifest(config, lm1, lm2)?;
    manifest.roi_box = Some(roi_box);
    let bounds = config.augment_bounds();

    let subject_manifest = |c: &Cropped, split: Split| {
        let n = &c.reg.native;
        let mut m = SubjectManifest::new(&n.id, &n.dataset, split);
        m.transforms = vec![
            TransformEntry { stage: "register_t2_to_t1".into(), transform: c.reg.t21.clone() },
            TransformEntry { stage: "register_t1_to_template".into(), transform: c.reg.t1m.clone() },
        ];
        m.similarity = c.reg.similarity.clone();
        m.roi_window = Some(window.clone());
        m
    };

    let train_out: Vec<(RoiCase, Vec<RoiCase>, SubjectManifest)> = train
        .into_par_iter()
        .map(|c| {
            let mut m = subject_manifest(&c, Split::Train);
            let n = &c.reg.native;
            let rec = SubjectRecord {
                id: n.id.clone(),
                dataset: n.dataset.clone(),
                t1: c.t1,
                t2: c.t2,
                brain_mask: c.mask,
                truth: c.labels,
                transform_log: m.transforms.clone(),
            };
            let (augmented, records) = augment_copies(&rec, config, &bounds, |a| {
                Ok(RoiCase { id: a.id, t1: a.t1, t2: a.t2, labels: a.truth })
            })
            .map_err(|e| e.in_stage("augment", &n.id))?;
            m.augmentations = records;
            Ok((RoiCase { id: rec.id, t1: rec.t1, t2: rec.t2, labels: rec.truth }, augmented, m))
        })
        .collect::<Result<_>>()?;

    let mut tests = Vec::new();
    for c in test {
        let m = subject_manifest(&c, Split::Test);
        manifest.subjects.push(m);
        let n = c.reg.native;
        tests.push(TestCase {
            dataset: n.dataset,
            roi: RoiCase { id: n.id, t1: c.t1, t2: c.t2, labels: None },
            restore: Restore::InverseChain { chain: vec![c.reg.t21, c.reg.t1m], native: n.t2.geometry().clone() },
            truth: n.truth,
        });
    }
    Ok(assemble(config, manifest, train_out, tests, flags))
}

fn assemble(
    config: &PipelineConfig,
    mut manifest: RunManifest,
    train_out: Vec<(RoiCase, Vec<RoiCase>, SubjectManifest)>,
    test: Vec<TestCase>,
    flags: Vec<SubjectFlag>,
) -> Prepared {
    let mut train = Vec::new();
    let mut augmented = Vec::new();
    for (case, aug, m) in train_out {
        train.push(case);
        augmented.extend(aug);
        manifest.subjects.push(m);
    }
    manifest.subjects.sort_by(|a, b| a.id.cmp(&b.id));
    if config.segmenter.kind == SegmenterKind::Atlas {
        manifest.atlas_id = train.first().map(|c| c.id.clone());
    }
    manifest.flags = flags;
    Prepared { method: config.method, train, augmented, test, manifest }
}

struct Padded {
    native_geometry: Geometry,
    dataset: String,
    t1: Volume,
    t2: Volume,
    mask: LabelMap,
    truth: Option<LabelMap>,
}

fn pad_native(n: Native, target: [usize; 3]) -> Result<Padded> {
    Ok(Padded {
        native_geometry: n.t2.geometry().clone(),
        t1: pad_to_shape(&n.t1, target, 0.0)?,
        t2: pad_to_shape(&n.t2, target, 0.0)?,
        mask: pad_to_shape(&n.mask, target, 0)?,
        truth: n.truth.as_ref().map(|t| pad_to_shape(t, target, 0)).transpose()?,
        dataset: n.dataset,
    })
}

fn crop_case(id: &str, t1: &Volume, t2: &Volume, labels: Option<&LabelMap>, window: &RoiWindow) -> Result<RoiCase> {
    Ok(RoiCase {
        id: id.to_string(),
        t1: crop_window(t1, window)?,
        t2: crop_window(t2, window)?,
        labels: labels.map(|l| crop_window(l, window)).transpose()?,
    })
}

fn truth_window(truth: &LabelMap, shape: [usize; 3]) -> Result<RoiWindow> {
    Ok(RoiWindow::around(&compute_com(truth)?, shape, truth.geometry()))
}

/// Method II up to segmentation: merge, mask, standardization, padding,
/// augmentation, localizer training and CoM-centred ROI cropping.
pub fn prepare_method2(inputs: PipelineInputs, config: &PipelineConfig) -> Result<Prepared> {
    check_inputs(&inputs)?;
    let mut flags = Vec::new();
    let train: Vec<Native> = sorted(inputs.train).into_par_iter().map(native).collect::<Result<_>>()?;
    let test_results: Vec<(String, Result<Native>)> =
        sorted(inputs.test).into_par_iter().map(|r| (r.id.clone(), native(r))).collect();
    let mut test = Vec::new();
    for (id, r) in test_results {
        test.extend(keep_or_flag(r, &id, &mut flags)?);
    }

    let pct = &config.histogram.percentiles;
    let stage = |e: Error| e.in_stage("histogram_standardization", "training set");
    let lm1 = landmarks(&train.iter().map(|n| (&n.t1, &n.mask)).collect::<Vec<_>>(), pct).map_err(stage)?;
    let lm2 = landmarks(&train.iter().map(|n| (&n.t2, &n.mask)).collect::<Vec<_>>(), pct).map_err(stage)?;
    let standardize = |mut n: Native| -> Result<Native> {
        n.t1 = standardize_histogram(&n.t1, &n.mask, &lm1)?;
        n.t2 = standardize_histogram(&n.t2, &n.mask, &lm2)?;
        Ok(n)
    };

    let target: [usize; 3] = std::array::from_fn(|a| train.iter().chain(&test).map(|n| n.t2.dims()[a]).max().unwrap());
    let mut manifest = base_manifest(config, lm1.clone(), lm2.clone())?;
    manifest.pad_dims = Some(target);
    let shape = config.roi.shape;
    let bounds = config.augment_bounds();

    let train_out: Vec<(RoiCase, Vec<RoiCase>, SubjectManifest, [f64; 3])> = train
        .into_par_iter()
        .map(|n| {
            let id = n.id.clone();
            let n = standardize(n).map_err(|e| e.in_stage("histogram_standardization", &id))?;
            let p = pad_native(n, target).map_err(|e| e.in_stage("pad", &id))?;
            let truth = p.truth.as_ref().expect("training truth checked");
            let offset = centroid_offset(&p.mask, truth).map_err(|e| e.in_stage("train_localizer", &id))?;
            let window = truth_window(truth, shape).map_err(|e| e.in_stage("roi_crop", &id))?;
            let case = crop_case(&id, &p.t1, &p.t2, Some(truth), &window).map_err(|e| e.in_stage("roi_crop", &id))?;
            let rec = SubjectRecord {
                id: id.clone(),
                dataset: p.dataset.clone(),
                t1: p.t1,
                t2: p.t2,
                brain_mask: p.mask,
                truth: p.truth,
                transform_log: Vec::new(),
            };
            let (augmented, records) = augment_copies(&rec, config, &bounds, |a| {
                let t = a.truth.as_ref().expect("augment keeps truth");
                let w = truth_window(t, shape)?;
                crop_case(&a.id, &a.t1, &a.t2, Some(t), &w)
            })
            .map_err(|e| e.in_stage("augment", &id))?;
            let mut m = SubjectManifest::new(&id, &rec.dataset, Split::Train);
            m.augmentations = records;
            m.com_mm = window.com_voxel.map(|v| window.source.index_to_world_point(v));
            m.roi_window = Some(window);
            Ok((case, augmented, m, offset))
        })
        .collect::<Result<_>>()?;
    let offsets: Vec<[f64; 3]> = train_out.iter().map(|t| t.3).collect();
    let localizer = LocalizerModel::from_offsets(&offsets).map_err(|e| e.in_stage("train_localizer", "training set"))?;
    manifest.localizer = Some(localizer.clone());

    let test_results: Vec<(String, Result<(TestCase, SubjectManifest)>)> = test
        .into_par_iter()
        .map(|n| {
            let id = n.id.clone();
            let run = || -> Result<(TestCase, SubjectManifest)> {
                let n = standardize(n).map_err(|e| e.in_stage("histogram_standardization", &id))?;
                let p = pad_native(n, target).map_err(|e| e.in_stage("pad", &id))?;
                let com = predict_com(&localizer, &p.mask).map_err(|e| e.in_stage("predict_com", &id))?;
                let window = RoiWindow::around(&com, shape, p.t2.geometry());
                let roi = crop_case(&id, &p.t1, &p.t2, None, &window).map_err(|e| e.in_stage("roi_crop", &id))?;
                let mut m = SubjectManifest::new(&id, &p.dataset, Split::Test);
                m.com_mm = Some(com.world);
                m.contained = p.truth.as_ref().map(|t| window.contains_labels(t));
                m.roi_window = Some(window.clone());
                let unpad = RoiWindow {
                    start: pad_offset(p.native_geometry.dims(), target).map(|o| o as i64),
                    shape: p.native_geometry.dims(),
                    com_voxel: None,
                    source: p.t2.geometry().clone(),
                };
                let truth = match p.truth {
                    Some(t) => Some(crop_window(&t, &unpad)?.with_geometry(p.native_geometry.clone())?),
                    None => None,
                };
                let case = TestCase {
                    dataset: p.dataset,
                    roi,
                    restore: Restore::Window { window, unpad, native: p.native_geometry },
                    truth,
                };
                Ok((case, m))
            };
            (id.clone(), run())
        })
        .collect();
    let mut tests = Vec::new();
    for (id, r) in test_results {
        if let Some((case, m)) = keep_or_flag(r, &id, &mut flags)? {
            if m.contained == Some(false) {
                flags.push(SubjectFlag {
                    subject_id: id.clone(),
                    kind: "containment".into(),
                    detail: format!("truth labels extend outside the {shape:?} window"),
                });
            }
            manifest.subjects.push(m);
            tests.push(case);
        }
    }
    let train_out = train_out.into_iter().map(|(c, a, m, _)| (c, a, m)).collect();
    Ok(assemble(config, manifest, train_out, tests, flags))
}

pub fn prepare(inputs: PipelineInputs, config: &PipelineConfig) -> Result<Prepared> {
    config.validate_settings()?;
    match config.method {
        Method::Method1 => prepare_method1(inputs, config),
        Method::Method2 => prepare_method2(inputs, config),
    }
}

/// The segmenter named by the config; the atlas is the first training case.
pub fn build_segmenter(prepared: &Prepared, config: &PipelineConfig) -> Result<Box<dyn Segmenter>> {
    match config.segmenter.kind {
        SegmenterKind::Atlas => {
            let atlas = prepared.train.first().ok_or_else(|| Error::Empty("no training subjects".into()))?;
            let labels = atlas.labels.clone().expect("training truth checked");
            Ok(Box::new(
                AtlasModel::new(&atlas.id, atlas.t2.clone(), labels, config.segmenter.registration.clone())
                    .map_err(|e| e.in_stage("segment", &atlas.id))?,
            ))
        }
        SegmenterKind::External => {
            let dir = config.segmenter.predictions.clone().ok_or_else(|| {
                Error::Config("segmenter.kind = \"external\" needs segmenter.predictions".into())
            })?;
            Ok(Box::new(ExternalPredictions { dir }))
        }
    }
}

fn segment_one(case: &TestCase, segmenter: &dyn Segmenter, config: &PipelineConfig, method: Method) -> Result<LabelMap> {
    let id = &case.roi.id;
    let input = SegmenterInput { id, t1: &case.roi.t1, t2: &case.roi.t2 };
    let pred = segmenter.segment(&input).map_err(|e| e.in_stage("segment", id))?;
    let restore_stage = match method {
        Method::Method1 => "inverse_transform",
        Method::Method2 => "restore_native",
    };
    let native = case.restore.apply(&pred).map_err(|e| e.in_stage(restore_stage, id))?;
    if method == Method::Method1 && config.smoothing.enabled {
        let spec = SmoothingSpec::in_voxels(config.smoothing.sigma_voxels, config.smoothing.threshold, native.geometry())
            .map_err(|e| e.in_stage("gaussian_smoothing", id))?;
        return Ok(smooth_labels(&native, &spec));
    }
    Ok(native)
}

/// Segments, restores to native space and evaluates every test case.
pub fn finish(prepared: Prepared, segmenter: &dyn Segmenter, config: &PipelineConfig) -> Result<RunOutput> {
    let method = prepared.method;
    let mut manifest = prepared.manifest;
    let mut flags = std::mem::take(&mut manifest.flags);
    let results: Vec<Result<LabelMap>> =
        prepared.test.par_iter().map(|c| segment_one(c, segmenter, config, method)).collect();
    let mut done = Vec::new();
    for (case, r) in prepared.test.iter().zip(results) {
        if let Some(pred) = keep_or_flag(r, &case.roi.id, &mut flags)? {
            done.push((case, pred));
        }
    }
    let cases: Vec<EvalCase> = done
        .iter()
        .filter_map(|(c, p)| {
            c.truth.as_ref().map(|t| EvalCase { subject_id: &c.roi.id, dataset: &c.dataset, pred: p, truth: t })
        })
        .collect();
    let mut report = EvalReport::build(method.name(), &cases)?;
    flags.sort_by(|a, b| (&a.subject_id, &a.kind).cmp(&(&b.subject_id, &b.kind)));
    report.flags = flags.clone();
    manifest.flags = flags;
    let predictions = done.into_iter().map(|(c, p)| (c.roi.id.clone(), p)).collect();
    Ok(RunOutput { report, manifest, predictions })
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(f)
}

/// In-memory run of the configured method.
pub fn run_with(inputs: PipelineInputs, config: &PipelineConfig) -> Result<RunOutput> {
    config.validate_settings()?;
    if config.method == Method::Method1 && inputs.template.is_none() {
        return Err(Error::Config("method1 needs a template image".into()));
    }
    with_pool(config.workers, || {
        let prepared = prepare(inputs, config)?;
        let segmenter = build_segmenter(&prepared, config)?;
        finish(prepared, segmenter.as_ref(), config)
    })
}

/// Validates the config, loads its inputs, runs and writes outputs to
/// `paths.work_dir` when set.
pub fn run(config: &PipelineConfig) -> Result<RunOutput> {
    config.validate()?;
    let inputs = load_inputs(config)?;
    let out = run_with(inputs, config)?;
    if let Some(dir) = &config.paths.work_dir {
        write_outputs(&out, dir)?;
    }
    Ok(out)
}

pub fn run_method1(config: &PipelineConfig) -> Result<RunOutput> {
    run(&PipelineConfig { method: Method::Method1, ..config.clone() })
}

pub fn run_method2(config: &PipelineConfig) -> Result<RunOutput> {
    run(&PipelineConfig { method: Method::Method2, ..config.clone() })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Report files, `manifest.json` and `predictions/<id>.nii.gz` under `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    emit_report(&out.report, dir)?;
    write_json(&dir.join(MANIFEST_JSON), &out.manifest)?;
    write_predictions(&dir.join("predictions"), &out.predictions)
}

/// Runs the preprocessing of the configured method and writes the external
/// trainer layout (augmented copies as `<id>_aug<k>`) plus the manifest.
pub fn export_trainer(config: &PipelineConfig, out_dir: &Path) -> Result<Prepared> {
    config.validate()?;
    let inputs = load_inputs(config)?;
    let prepared = with_pool(config.workers, || prepare(inputs, config))?;
    let train: Vec<ExchangeCase> = prepared.train.iter().chain(&prepared.augmented).map(RoiCase::exchange).collect();
    let test: Vec<ExchangeCase> = prepared.test.iter().map(|c| c.roi.exchange()).collect();
    export_training_set(&train, &test, out_dir)?;
    write_json(&out_dir.join(MANIFEST_JSON), &prepared.manifest)?;
    Ok(prepared)
}

/// Merges echoes and applies masks for every cohort subject, writing
/// `<out>/<id>/{t1,t2,mask}.nii.gz`.
pub fn preprocess_cohort(config: &PipelineConfig, out_dir: &Path) -> Result<Vec<String>> {
    config.validate()?;
    let inputs = load_inputs(config)?;
    let subjects: Vec<RawSubject> = inputs.train.into_iter().chain(inputs.test).collect();
    with_pool(config.workers, || {
        subjects
            .into_par_iter()
            .map(|r| {
                let n = native(r)?;
                let dir = out_dir.join(&n.id);
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                save_volume(&n.t1, dir.join("t1.nii.gz"))?;
                save_volume(&n.t2, dir.join("t2.nii.gz"))?;
                save_volume(&n.mask, dir.join("mask.nii.gz"))?;
                Ok(n.id)
            })
            .collect()
    })
}

/// Evaluates native-space predictions `<pred_dir>/<id>.nii.gz` against the
/// truth of every test subject of a cohort.
pub fn evaluate_predictions(method: &str, cohort_dir: &Path, pred_dir: &Path) -> Result<EvalReport> {
    let cohort = load_cohort(cohort_dir)?;
    let mut preds = Vec::new();
    for s in cohort.test.iter().filter(|s| s.truth.is_some()) {
        let expected = s.brain_mask.geometry();
        let p = crate::segment::import_predictions(pred_dir, &[(s.id.clone(), expected.clone())])?;
        preds.push(p.into_iter().next().expect("one prediction per id"));
    }
    let cases: Vec<EvalCase> = cohort
        .test
        .iter()
        .filter_map(|s| s.truth.as_ref().map(|t| (s, t)))
        .zip(&preds)
        .map(|((s, t), p)| EvalCase { subject_id: &s.id, dataset: &s.dataset, pred: p, truth: t })
        .collect();
    EvalReport::build(method, &cases)
}

/// One metric of one structure, side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub structure: Structure,
    pub metric: String,
    pub value_a: f64,
    pub value_b: f64,
    /// `value_a - value_b`.
    pub difference: f64,
    /// `a`, `b` or `tie`.
    pub better: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method_a: String,
    pub method_b: String,
    pub rows: Vec<ComparisonRow>,
}

pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_JSON: &str = "comparison.json";

/// Per-structure Dice, volume and surface metrics of two reports over the
/// same subjects. Dice: higher is better; the relative metrics: lower.
pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<Comparison> {
    let (ia, ib) = (a.subject_ids(), b.subject_ids());
    if ia != ib {
        return Err(Error::Validation(format!("reports cover different subjects: {ia:?} vs {ib:?}")));
    }
    let mut rows = Vec::new();
    for s in Structure::ALL {
        let (Some(x), Some(y)) = (a.aggregate(s, "all"), b.aggregate(s, "all")) else {
            return Err(Error::Validation(format!("structure {s} missing from a report")));
        };
        let metrics = [
            ("dice", Some(x.dice_mean), Some(y.dice_mean), true),
            ("volume_metric_pct", x.volume_metric_pct, y.volume_metric_pct, false),
            ("surface_metric_pct", x.surface_metric_pct, y.surface_metric_pct, false),
        ];
        for (metric, va, vb, higher) in metrics {
            let (Some(va), Some(vb)) = (va, vb) else {
                return Err(Error::Validation(format!("{metric} undefined for {s}")));
            };
            let better = if va == vb {
                "tie"
            } else if (va > vb) == higher {
                "a"
            } else {
                "b"
            };
            rows.push(ComparisonRow {
                structure: s,
                metric: metric.into(),
                value_a: va,
                value_b: vb,
                difference: va - vb,
                better: better.into(),
            });
        }
    }
    Ok(Comparison { method_a: a.method.clone(), method_b: b.method.clone(), rows })
}

pub fn emit_comparison(c: &Comparison, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(COMPARISON_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    for r in &c.rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join(COMPARISON_JSON), c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::StructureStats;
    use crate::phantom::{generate_cohort, generate_template, PhantomParams};

    #[test]
    fn config_defaults_and_round_trip() {
        let c = PipelineConfig::default();
        assert_eq!(c.roi.shape, [78, 72, 60]);
        assert_eq!(c.roi.margin, 10);
        assert_eq!(c.augmentation.copies, 4);
        assert_eq!(c.augment_bounds(), AugmentBounds::method1());
        let m2 = PipelineConfig { method: Method::Method2, ..c.clone() };
        assert_eq!(m2.augment_bounds(), AugmentBounds::method2());
        let text = c.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), c);
        assert_eq!(c.sha256().unwrap(), c.clone().sha256().unwrap());
        assert_ne!(c.sha256().unwrap(), m2.sha256().unwrap());
    }

    #[test]
    fn config_parsing_and_validation() {
        let c = PipelineConfig::from_toml_str("method = \"method2\"\n[roi]\nshape = [40, 40, 30]\n").unwrap();
        assert_eq!((c.method, c.roi.shape, c.roi.margin), (Method::Method2, [40, 40, 30], 10));
        assert!(PipelineConfig::from_toml_str("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml_str("[roi]\nshap = [1, 1, 1]").is_err());

        let missing_template = PipelineConfig::default();
        let err = missing_template.validate().unwrap_err();
        assert!(err.is_validation() && err.to_string().contains("template"), "{err}");

        let ext = PipelineConfig {
            segmenter: SegmenterConfig { kind: SegmenterKind::External, ..Default::default() },
            ..Default::default()
        };
        assert!(ext.validate_settings().is_err());
        let bad = PipelineConfig { workers: 0, ..Default::default() };
        assert!(bad.validate_settings().is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "method = \"method2\"\n[paths]\ncohort = \"nowhere\"\n").unwrap();
        let loaded = PipelineConfig::load(&path).unwrap();
        assert_eq!(loaded.paths.cohort.as_deref(), Some(dir.path().join("nowhere").as_path()));
        assert!(loaded.validate().unwrap_err().to_string().contains("does not exist"));
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, &["a", "augment", "0"]), derive_seed(1, &["a", "augment", "0"]));
        assert_ne!(derive_seed(1, &["a", "augment", "0"]), derive_seed(1, &["a", "augment", "1"]));
        assert_ne!(derive_seed(1, &["a"]), derive_seed(2, &["a"]));
    }

    #[test]
    fn method1_needs_template_before_work() {
        let err = run_with(PipelineInputs::default(), &PipelineConfig::default()).unwrap_err();
        assert!(err.is_validation(), "{err}");
    }

    fn small_inputs(n: usize, seed: u64) -> (PipelineInputs, PhantomParams) {
        let params = PhantomParams { dims: [96, 96, 80], ..Default::default() };
        let cohort = generate_cohort(n, &params, seed).unwrap();
        let template = generate_template(&params).unwrap();
        let inputs = PipelineInputs {
            train: cohort.train.into_iter().map(|s| s.raw).collect(),
            test: cohort.test.into_iter().map(|s| s.raw).collect(),
            template: Some(TemplateImage { t1: template.t1, mask: Some(template.brain_mask) }),
        };
        (inputs, params)
    }

    fn quick(method: Method) -> PipelineConfig {
        PipelineConfig {
            method,
            registration: RegistrationParams { levels: 2, samples: 6000, ..Default::default() },
            segmenter: SegmenterConfig {
                registration: RegistrationParams { levels: 2, samples: 6000, ..RegistrationParams::msd() },
                ..Default::default()
            },
            augmentation: AugmentConfig { copies: 1, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn method1_small_cohort() {
        let (inputs, _) = small_inputs(4, 5);
        let test_geoms: Vec<Geometry> = inputs.test.iter().map(|s| s.t2_echoes[0].geometry().clone()).collect();
        let out = run_with(inputs, &quick(Method::Method1)).unwrap();
        assert_eq!(out.manifest.stages, Method::Method1.stages(true));
        assert_eq!(out.predictions.len(), 1);
        assert!(crate::geometry_equal(out.predictions[0].1.geometry(), &test_geoms[0], 1e-9));
        let train = out.manifest.subjects.iter().filter(|s| s.split == Split::Train);
        assert_eq!(out.manifest.atlas_id.as_deref(), train.clone().next().map(|s| s.id.as_str()));
        assert!(train.clone().all(|s| s.augmentations.len() == 1 && s.transforms.len() == 2));
        assert!(out.report.mean_dice() > 0.6, "{}", out.report.mean_dice());
    }

    #[test]
    fn method2_small_cohort_and_containment() {
        let (inputs, _) = small_inputs(4, 6);
        let out = run_with(inputs.clone(), &quick(Method::Method2)).unwrap();
        assert!(out.manifest.stages.iter().all(|s| !s.starts_with("register")));
        assert!(out.manifest.localizer.is_some());
        assert!(out.report.flags.is_empty(), "{:?}", out.report.flags);
        assert!(out.report.mean_dice() > 0.6, "{}", out.report.mean_dice());

        let tiny = PipelineConfig { roi: RoiConfig { shape: [48, 72, 60], margin: 10 }, ..quick(Method::Method2) };
        let out = run_with(inputs, &tiny).unwrap();
        assert!(out.report.flags.iter().any(|f| f.kind == "containment"));
    }

    fn fixture_report(method: &str, dice: [f64; 6], vol: [f64; 6], surf: [f64; 6]) -> EvalReport {
        let rows = Structure::ALL
            .iter()
            .enumerate()
            .map(|(i, &s)| StructureStats {
                subject_id: "s".into(),
                dataset: "d".into(),
                method: method.into(),
                structure: s,
                dice: dice[i],
                vol_pred_mm3: 100.0 + vol[i],
                vol_man_mm3: 100.0,
                surf_pred_mm2: 100.0 + surf[i],
                surf_man_mm2: 100.0,
                signed_offset_pct: Some(vol[i]),
            })
            .collect();
        EvalReport::from_rows(method, rows)
    }

    #[test]
    fn compare_fixture_and_self() {
        let a = fixture_report(
            "method1",
            [0.877, 0.817, 0.693, 0.904, 0.804, 0.631],
            [9.0, 12.0, 25.0, 8.0, 13.0, 30.0],
            [40.0, 45.0, 60.0, 38.0, 47.0, 65.0],
        );
        let b = fixture_report(
            "method2",
            [0.868, 0.810, 0.714, 0.894, 0.811, 0.718],
            [7.0, 10.0, 15.0, 8.0, 11.0, 14.0],
            [10.0, 12.0, 14.0, 9.0, 12.0, 13.0],
        );
        let c = compare(&a, &b).unwrap();
        assert_eq!(c.rows.len(), 18);
        let stn_l = c.rows.iter().find(|r| r.structure == Structure::StnL && r.metric == "dice").unwrap();
        assert_eq!(stn_l.better, "b");
        assert!((stn_l.difference + 0.087).abs() < 1e-12);
        let rn_r = c.rows.iter().find(|r| r.structure == Structure::RnR && r.metric == "dice").unwrap();
        assert_eq!(rn_r.better, "a");
        let vol = c.rows.iter().find(|r| r.structure == Structure::RnL && r.metric == "volume_metric_pct").unwrap();
        assert_eq!(vol.better, "tie");

        let same = compare(&a, &a).unwrap();
        assert!(same.rows.iter().all(|r| r.difference == 0.0 && r.better == "tie"));

        let mut other = b.clone();
        for r in &mut other.rows {
            r.subject_id = "t".into();
        }
        assert!(compare(&a, &other).is_err());

        let dir = tempfile::tempdir().unwrap();
        emit_comparison(&c, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(COMPARISON_CSV)).unwrap();
        assert!(text.starts_with("structure,metric,value_a,value_b,difference,better"));
        assert_eq!(text.lines().count(), 19);
    }
}
