//! Segmenter contract, the single-atlas reference segmenter and the file
//! exchange layout used by external trainers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{load_labels, load_volume, save_volume};
use crate::registration::{register_affine, RegistrationParams};
use crate::volume::{Geometry, LabelMap, Structure, Volume};
use crate::xform::resample_labels;

/// Tolerance (mm) for prediction grids read back from disk; headers store
/// the affine in single precision.
pub const IMPORT_GEOMETRY_TOL: f64 = 1e-4;

/// Preprocessed images of one subject on a shared grid.
#[derive(Clone, Copy, Debug)]
pub struct SegmenterInput<'a> {
    pub id: &'a str,
    pub t1: &'a Volume,
    pub t2: &'a Volume,
}

impl SegmenterInput<'_> {
    pub fn validate(&self) -> Result<()> {
        self.t2.require_same_grid(self.t1, &format!("{} segmenter input", self.id))
    }
}

/// Anything that maps a preprocessed input to labels on the input grid.
pub trait Segmenter: Sync {
    fn name(&self) -> &str;
    fn segment(&self, input: &SegmenterInput) -> Result<LabelMap>;
}

/// Reference segmenter: registers the atlas T2 to the input T2 and pulls the
/// atlas labels across with nearest-neighbour interpolation.
#[derive(Clone, Debug)]
pub struct AtlasModel {
    pub atlas_id: String,
    pub atlas_t2: Volume,
    pub atlas_labels: LabelMap,
    pub registration: RegistrationParams,
}

impl AtlasModel {
    pub fn new(atlas_id: &str, atlas_t2: Volume, atlas_labels: LabelMap, registration: RegistrationParams) -> Result<Self> {
        atlas_t2.require_same_grid(&atlas_labels, "atlas labels")?;
        let codes = atlas_labels.codes();
        if codes != [1, 2, 3, 4, 5, 6] {
            return Err(Error::Validation(format!("atlas {atlas_id} must contain all six codes, has {codes:?}")));
        }
        registration.validate()?;
        Ok(AtlasModel { atlas_id: atlas_id.to_string(), atlas_t2, atlas_labels, registration })
    }
}

pub fn segment(input: &SegmenterInput, model: &AtlasModel) -> Result<LabelMap> {
    input.validate()?;
    let out = register_affine(input.t2, &model.atlas_t2, &model.registration)?;
    resample_labels(&model.atlas_labels, &out.transform, input.t2.geometry())
}

impl Segmenter for AtlasModel {
    fn name(&self) -> &str {
        "atlas"
    }

    fn segment(&self, input: &SegmenterInput) -> Result<LabelMap> {
        segment(input, self)
    }
}

/// Reads `<dir>/<id>.nii.gz` predictions made by an external segmenter.
#[derive(Clone, Debug)]
pub struct ExternalPredictions {
    pub dir: PathBuf,
}

impl Segmenter for ExternalPredictions {
    fn name(&self) -> &str {
        "external"
    }

    fn segment(&self, input: &SegmenterInput) -> Result<LabelMap> {
        read_prediction(&self.dir, input.id, input.t2.geometry())
    }
}

fn read_prediction(dir: &Path, id: &str, expected: &Geometry) -> Result<LabelMap> {
    let path = dir.join(format!("{id}{FILE_ENDING}"));
    let labels = load_labels(&path).map_err(|e| Error::Validation(format!("prediction {}: {e}", path.display())))?;
    if let Some(d) = expected.diff(labels.geometry(), IMPORT_GEOMETRY_TOL) {
        return Err(Error::Validation(format!("prediction {}: grid differs from ROI: {d}", path.display())));
    }
    // Snap onto the exact expected grid.
    labels.with_geometry(expected.clone())
}

/// Loads one prediction per `(id, expected geometry)`; all failing files
/// are reported together.
pub fn import_predictions(dir: &Path, expected: &[(String, Geometry)]) -> Result<Vec<LabelMap>> {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (id, g) in expected {
        match read_prediction(dir, id, g) {
            Ok(l) => ok.push(l),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if failures.is_empty() {
        Ok(ok)
    } else {
        Err(Error::Validation(failures.join("; ")))
    }
}

pub const FILE_ENDING: &str = ".nii.gz";
pub const DATASET_JSON: &str = "dataset.json";

/// One subject in the exchange layout.
#[derive(Clone, Debug)]
pub struct ExchangeCase {
    pub id: String,
    pub t1: Volume,
    pub t2: Volume,
    pub labels: Option<LabelMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub channel_names: BTreeMap<String, String>,
    pub labels: BTreeMap<String, String>,
    #[serde(rename = "numTraining")]
    pub num_training: usize,
    pub file_ending: String,
}

impl DatasetDescriptor {
    fn new(num_training: usize) -> Self {
        let mut labels = BTreeMap::from([("0".to_string(), "background".to_string())]);
        for s in Structure::ALL {
            labels.insert(s.code().to_string(), s.name().to_string());
        }
        DatasetDescriptor {
            channel_names: BTreeMap::from([("0".into(), "T1".into()), ("1".into(), "T2".into())]),
            labels,
            num_training,
            file_ending: FILE_ENDING.into(),
        }
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `imagesTr/<id>_0000` (T1), `imagesTr/<id>_0001` (T2),
/// `labelsTr/<id>`, `imagesTs/` for `test` and `dataset.json`.
pub fn export_training_set(train: &[ExchangeCase], test: &[ExchangeCase], out_dir: &Path) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Empty("no training subjects to export".into()));
    }
    let missing: Vec<&str> = train.iter().filter(|c| c.labels.is_none()).map(|c| c.id.as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!("training subjects without labels: {}", missing.join(", "))));
    }
    let images_tr = out_dir.join("imagesTr");
    let labels_tr = out_dir.join("labelsTr");
    mkdir(&images_tr)?;
    mkdir(&labels_tr)?;
    for c in train {
        c.t2.require_same_grid(&c.t1, &c.id)?;
        save_volume(&c.t1, images_tr.join(format!("{}_0000{FILE_ENDING}", c.id)))?;
        save_volume(&c.t2, images_tr.join(format!("{}_0001{FILE_ENDING}", c.id)))?;
        save_volume(c.labels.as_ref().unwrap(), labels_tr.join(format!("{}{FILE_ENDING}", c.id)))?;
    }
    if !test.is_empty() {
        let images_ts = out_dir.join("imagesTs");
        mkdir(&images_ts)?;
        for c in test {
            save_volume(&c.t1, images_ts.join(format!("{}_0000{FILE_ENDING}", c.id)))?;
            save_volume(&c.t2, images_ts.join(format!("{}_0001{FILE_ENDING}", c.id)))?;
        }
    }
    let path = out_dir.join(DATASET_JSON);
    let json = serde_json::to_string_pretty(&DatasetDescriptor::new(train.len()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Reads the training part of an exchange layout back.
pub fn import_training_set(dir: &Path) -> Result<Vec<ExchangeCase>> {
    let path = dir.join(DATASET_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let desc: DatasetDescriptor = serde_json::from_str(&text)?;
    let labels_tr = dir.join("labelsTr");
    let mut ids: Vec<String> = std::fs::read_dir(&labels_tr)
        .map_err(|e| Error::io(&labels_tr, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(FILE_ENDING)).map(str::to_string))
        .collect();
    ids.sort();
    if ids.len() != desc.num_training {
        return Err(Error::Validation(format!(
            "dataset.json lists {} training cases, found {}",
            desc.num_training,
            ids.len()
        )));
    }
    ids.into_iter()
        .map(|id| {
            let img = |ch: &str| load_volume(dir.join("imagesTr").join(format!("{id}_{ch}{FILE_ENDING}")));
            let t1 = img("0000")?;
            let t2 = img("0001")?;
            let labels = load_labels(labels_tr.join(format!("{id}{FILE_ENDING}")))?;
            Ok(ExchangeCase { id, t1, t2, labels: Some(labels) })
        })
        .collect()
}

/// Writes label maps as `<dir>/<id>.nii.gz`.
pub fn write_predictions(dir: &Path, predictions: &[(String, LabelMap)]) -> Result<()> {
    mkdir(dir)?;
    for (id, l) in predictions {
        save_volume(l, dir.join(format!("{id}{FILE_ENDING}")))?;
    }
    Ok(())
}
