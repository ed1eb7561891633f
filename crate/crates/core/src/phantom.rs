//! Seeded synthetic head phantoms with exact ground-truth labels.
//!
//! Anatomy is defined in a template frame (mm, origin at the brain centre):
//! an ellipsoidal brain with a cortical rim, two ventricles, a skull shell and
//! six ellipsoidal nuclei. A subject is the template anatomy with jittered
//! nuclei, seen through a random affine pose and rendered on its own grid.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{load_labels, load_volume, save_volume};
use crate::volume::{Geometry, LabelMap, RawSubject, Structure, Volume};
use crate::xform::AffineTransform;

/// Dataset tags assigned round-robin across a cohort.
pub const DATASET_TAGS: [&str; 3] = ["synth_a", "synth_b", "synth_c"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
}

impl Ellipsoid {
    pub fn volume_mm3(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.semi_axes_mm.iter().product::<f64>()
    }

    #[inline]
    fn contains(&self, u: [f64; 3]) -> bool {
        self.radius2(u) <= 1.0
    }

    #[inline]
    fn radius2(&self, u: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| {
                let d = (u[a] - self.center_mm[a]) / self.semi_axes_mm[a];
                d * d
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NucleusSpec {
    pub structure: Structure,
    #[serde(flatten)]
    pub shape: Ellipsoid,
}

/// Intensities of each tissue class in one contrast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueIntensity {
    pub white: f64,
    pub gray: f64,
    pub csf: f64,
    pub skull: f64,
    pub rn: f64,
    pub sn: f64,
    pub stn: f64,
}

impl TissueIntensity {
    fn nucleus(&self, s: Structure) -> f64 {
        match s {
            Structure::RnR | Structure::RnL => self.rn,
            Structure::SnR | Structure::SnL => self.sn,
            Structure::StnR | Structure::StnL => self.stn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityTable {
    pub t1: TissueIntensity,
    pub t2: TissueIntensity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Per-dataset grid dims, indexed like [`DATASET_TAGS`]; empty means
    /// every subject uses `dims`.
    pub dataset_dims: Vec<[usize; 3]>,
    pub brain_semi_axes_mm: [f64; 3],
    pub cortex_thickness_mm: f64,
    pub skull_thickness_mm: f64,
    pub ventricles: Vec<Ellipsoid>,
    pub nuclei: Vec<NucleusSpec>,
    pub intensities: IntensityTable,
    pub center_jitter_mm: f64,
    pub axis_jitter_frac: f64,
    pub noise_std: f64,
    pub echoes: usize,
    pub pose_rotation_deg: f64,
    pub pose_translation_mm: f64,
    pub pose_scale_delta: f64,
    pub gain_range: [f64; 2],
    pub max_retries: usize,
}

fn nucleus(structure: Structure, center_mm: [f64; 3], semi_axes_mm: [f64; 3]) -> NucleusSpec {
    NucleusSpec {
        structure,
        shape: Ellipsoid { center_mm, semi_axes_mm },
    }
}

impl Default for PhantomParams {
    fn default() -> Self {
        // Right hemisphere on +x. Sizes are fixtures: RN > SN > STN, STN ~ 118 mm^3.
        let right = [
            (Structure::RnR, [4.5, -4.0, -2.0], [3.8, 4.0, 3.8]),
            (Structure::SnR, [10.0, -2.0, -8.0], [2.8, 5.0, 2.8]),
            (Structure::StnR, [11.0, 4.5, 2.0], [2.5, 4.5, 2.5]),
        ];
        let mut nuclei = Vec::new();
        for (s, c, a) in right {
            nuclei.push(nucleus(s, c, a));
        }
        for (s, c, a) in right {
            let left = Structure::from_code(s.code() + 3).unwrap();
            nuclei.push(nucleus(left, [-c[0], c[1], c[2]], a));
        }
        PhantomParams {
            dims: [160, 160, 160],
            spacing: [0.5, 0.5, 0.5],
            dataset_dims: Vec::new(),
            brain_semi_axes_mm: [27.0, 31.0, 24.0],
            cortex_thickness_mm: 3.0,
            skull_thickness_mm: 2.5,
            ventricles: vec![
                Ellipsoid { center_mm: [6.0, 12.0, 10.0], semi_axes_mm: [2.5, 9.0, 3.5] },
                Ellipsoid { center_mm: [-6.0, 12.0, 10.0], semi_axes_mm: [2.5, 9.0, 3.5] },
                Ellipsoid { center_mm: [0.0, -16.0, -12.0], semi_axes_mm: [2.0, 2.5, 3.0] },
            ],
            nuclei,
            intensities: IntensityTable {
                t1: TissueIntensity { white: 1.0, gray: 0.65, csf: 0.2, skull: 0.4, rn: 0.8, sn: 0.75, stn: 0.82 },
                t2: TissueIntensity { white: 0.5, gray: 0.75, csf: 1.0, skull: 0.15, rn: 0.22, sn: 0.28, stn: 0.25 },
            },
            center_jitter_mm: 0.4,
            axis_jitter_frac: 0.04,
            noise_std: 0.02,
            echoes: 3,
            pose_rotation_deg: 5.0,
            pose_translation_mm: 4.0,
            pose_scale_delta: 0.04,
            gain_range: [0.8, 1.25],
            max_retries: 8,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        Geometry::centered(self.dims, self.spacing)?;
        if self.nuclei.len() != 6 || Structure::ALL.iter().any(|s| !self.nuclei.iter().any(|n| n.structure == *s)) {
            return Err(Error::Validation("phantom needs exactly one nucleus per structure".into()));
        }
        let vol = |s: Structure| {
            self.nuclei
                .iter()
                .find(|n| n.structure == s)
                .map(|n| n.shape.volume_mm3())
                .unwrap()
        };
        for (stn, rn, sn) in [
            (Structure::StnR, Structure::RnR, Structure::SnR),
            (Structure::StnL, Structure::RnL, Structure::SnL),
        ] {
            if !(vol(stn) < vol(rn) && vol(stn) < vol(sn)) {
                return Err(Error::Validation("STN analog must be smaller than RN and SN".into()));
            }
        }
        for n in &self.nuclei {
            let r2: f64 = (0..3)
                .map(|a| {
                    let reach = n.shape.center_mm[a].abs() + n.shape.semi_axes_mm[a];
                    (reach / self.brain_semi_axes_mm[a]).powi(2)
                })
                .sum();
            if r2 >= 0.8 {
                return Err(Error::Validation(format!("{} extends too close to the brain edge", n.structure)));
            }
        }
        if self.echoes == 0 {
            return Err(Error::Validation("echoes must be >= 1".into()));
        }
        if !(self.gain_range[0] > 0.0 && self.gain_range[0] <= self.gain_range[1]) {
            return Err(Error::Validation(format!("bad gain range {:?}", self.gain_range)));
        }
        Ok(())
    }

    fn dims_for(&self, dataset_index: usize) -> [usize; 3] {
        if self.dataset_dims.is_empty() {
            self.dims
        } else {
            self.dataset_dims[dataset_index % self.dataset_dims.len()]
        }
    }
}

/// Template-frame anatomy of one subject, after jitter.
#[derive(Clone, Debug)]
struct Anatomy {
    nuclei: Vec<NucleusSpec>,
}

#[derive(Clone, Copy, PartialEq)]
enum Tissue {
    Air,
    Skull,
    Gray,
    White,
    Csf,
    Nucleus(Structure),
}

struct Renderer<'a> {
    params: &'a PhantomParams,
    anatomy: &'a Anatomy,
    brain: Ellipsoid,
    skull: Ellipsoid,
    cortex_r2: f64,
}

impl<'a> Renderer<'a> {
    fn new(params: &'a PhantomParams, anatomy: &'a Anatomy) -> Self {
        let b = params.brain_semi_axes_mm;
        let min_axis = b.iter().copied().fold(f64::INFINITY, f64::min);
        let inner = (1.0 - params.cortex_thickness_mm / min_axis).max(0.0);
        Renderer {
            params,
            anatomy,
            brain: Ellipsoid { center_mm: [0.0; 3], semi_axes_mm: b },
            skull: Ellipsoid {
                center_mm: [0.0; 3],
                semi_axes_mm: b.map(|a| a + params.skull_thickness_mm),
            },
            cortex_r2: inner * inner,
        }
    }

    /// Tissue at template point `u`, plus the number of nuclei claiming it.
    fn tissue(&self, u: [f64; 3]) -> (Tissue, usize) {
        let r2 = self.brain.radius2(u);
        if r2 > 1.0 {
            return if self.skull.contains(u) { (Tissue::Skull, 0) } else { (Tissue::Air, 0) };
        }
        let mut hit = None;
        let mut claims = 0;
        for n in &self.anatomy.nuclei {
            if n.shape.contains(u) {
                claims += 1;
                hit.get_or_insert(n.structure);
            }
        }
        if let Some(s) = hit {
            return (Tissue::Nucleus(s), claims);
        }
        if self.params.ventricles.iter().any(|v| v.contains(u)) {
            return (Tissue::Csf, 0);
        }
        if r2 > self.cortex_r2 {
            (Tissue::Gray, 0)
        } else {
            (Tissue::White, 0)
        }
    }
}

/// Smooth multiplicative texture tied to the anatomy.
#[inline]
fn texture(u: [f64; 3]) -> f64 {
    use std::f64::consts::TAU;
    1.0 + 0.08 * (TAU * u[0] / 17.0 + 0.3).sin() * (TAU * u[1] / 13.0 + 1.1).sin() * (TAU * u[2] / 11.0 + 0.7).sin()
}

fn intensity(table: &TissueIntensity, t: Tissue, u: [f64; 3]) -> f64 {
    match t {
        Tissue::Air => 0.0,
        Tissue::Skull => table.skull,
        Tissue::Gray => table.gray * texture(u),
        Tissue::White => table.white * texture(u),
        Tissue::Csf => table.csf,
        Tissue::Nucleus(s) => table.nucleus(s),
    }
}

/// Everything rendered for one subject on its native grid.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub t1: Volume,
    pub t2_echoes: Vec<Volume>,
    pub brain_mask: LabelMap,
    pub labels: LabelMap,
    /// Head (brain + skull) mask, for tests that need the skull shell.
    pub head_mask: LabelMap,
}

struct RenderSettings {
    gains: [f64; 2],
    noise_std: f64,
    echoes: usize,
    noise_seed: u64,
}

fn render(
    params: &PhantomParams,
    anatomy: &Anatomy,
    pose: &AffineTransform,
    geometry: &Geometry,
    settings: &RenderSettings,
) -> Result<Rendered> {
    let renderer = Renderer::new(params, anatomy);
    let to_template = pose.invert()?.compose(&AffineTransform::from_matrix(*geometry.index_to_world())?);
    let [nx, ny, nz] = geometry.dims();
    let n = geometry.len();

    // Tissue classification is pure per voxel; noise is added afterwards from
    // one sequential stream so results do not depend on thread count.
    let slabs: Vec<Result<Vec<(Tissue, [f64; 3])>>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let mut out = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                for i in 0..nx {
                    let u = to_template.apply([i as f64, j as f64, k as f64]);
                    let (t, claims) = renderer.tissue(u);
                    if claims > 1 {
                        return Err(Error::Validation("nuclei overlap".into()));
                    }
                    out.push((t, u));
                }
            }
            Ok(out)
        })
        .collect();
    let mut voxels = Vec::with_capacity(n);
    for s in slabs {
        voxels.extend(s?);
    }

    let tables = [&params.intensities.t1, &params.intensities.t2];
    let mut rng = ChaCha8Rng::seed_from_u64(settings.noise_seed);
    let noise = Normal::new(0.0, settings.noise_std.max(0.0)).map_err(|e| Error::Validation(e.to_string()))?;
    let mut render_contrast = |c: usize| -> Vec<f32> {
        voxels
            .iter()
            .map(|&(t, u)| {
                if t == Tissue::Air {
                    return 0.0;
                }
                let clean = intensity(tables[c], t, u) * settings.gains[c];
                let noisy = if settings.noise_std > 0.0 { clean + noise.sample(&mut rng) } else { clean };
                noisy.max(0.0) as f32
            })
            .collect()
    };
    let t1 = render_contrast(0);
    let echoes: Vec<Vec<f32>> = (0..settings.echoes).map(|_| render_contrast(1)).collect();

    let labels: Vec<u8> = voxels
        .iter()
        .map(|(t, _)| match t {
            Tissue::Nucleus(s) => s.code(),
            _ => 0,
        })
        .collect();
    let brain: Vec<u8> = voxels
        .iter()
        .map(|(t, _)| !matches!(t, Tissue::Air | Tissue::Skull) as u8)
        .collect();
    let head: Vec<u8> = voxels.iter().map(|(t, _)| (*t != Tissue::Air) as u8).collect();

    Ok(Rendered {
        t1: Volume::new(geometry.clone(), t1)?,
        t2_echoes: echoes
            .into_iter()
            .map(|e| Volume::new(geometry.clone(), e))
            .collect::<Result<_>>()?,
        brain_mask: LabelMap::new(geometry.clone(), brain)?,
        labels: LabelMap::new(geometry.clone(), labels)?,
        head_mask: LabelMap::new(geometry.clone(), head)?,
    })
}

fn jittered_anatomy(params: &PhantomParams, rng: &mut ChaCha8Rng) -> Result<Anatomy> {
    let std: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
    let mut draw = |scale: f64| std.sample(&mut *rng).clamp(-2.5, 2.5) * scale;
    let nuclei = params
        .nuclei
        .iter()
        .map(|n| {
            let mut s = n.clone();
            for a in 0..3 {
                s.shape.center_mm[a] += draw(params.center_jitter_mm);
            }
            for a in 0..3 {
                s.shape.semi_axes_mm[a] *= 1.0 + draw(params.axis_jitter_frac);
            }
            s
        })
        .collect();
    Ok(Anatomy { nuclei })
}

/// Random pose: rotation, translation and isotropic scale within the bounds.
fn random_pose(params: &PhantomParams, rng: &mut ChaCha8Rng) -> AffineTransform {
    let rot = std::array::from_fn(|_| rng.random_range(-1.0..=1.0) * params.pose_rotation_deg);
    let trans = std::array::from_fn(|_| rng.random_range(-1.0..=1.0) * params.pose_translation_mm);
    let s = 1.0 + rng.random_range(-1.0..=1.0) * params.pose_scale_delta;
    AffineTransform::translation(trans)
        .compose(&AffineTransform::rotation_deg(rot))
        .compose(&AffineTransform::scaling([s; 3]))
}

/// A generated subject with its ground-truth template-to-native pose.
#[derive(Clone, Debug)]
pub struct PhantomSubject {
    pub raw: RawSubject,
    /// Maps template world (mm) to this subject's native world.
    pub pose: AffineTransform,
    pub seed: u64,
    /// Jitter-free configured nucleus centres mapped into native space.
    pub nominal_centers_mm: Vec<[f64; 3]>,
}

/// Jitter-free, noise-free anatomy at identity pose.
#[derive(Clone, Debug)]
pub struct Template {
    pub t1: Volume,
    pub t2: Volume,
    pub brain_mask: LabelMap,
    pub labels: LabelMap,
}

pub fn generate_template(params: &PhantomParams) -> Result<Template> {
    params.validate()?;
    let geometry = Geometry::centered(params.dims, params.spacing)?;
    let anatomy = Anatomy { nuclei: params.nuclei.clone() };
    let r = render(
        params,
        &anatomy,
        &AffineTransform::identity(),
        &geometry,
        &RenderSettings { gains: [1.0, 1.0], noise_std: 0.0, echoes: 1, noise_seed: 0 },
    )?;
    Ok(Template {
        t1: r.t1,
        t2: r.t2_echoes.into_iter().next().unwrap(),
        brain_mask: r.brain_mask,
        labels: r.labels,
    })
}

/// Renders the template anatomy of `params` (no jitter) at an explicit pose
/// and grid, with optional noise; used by registration tests.
pub fn render_posed(
    params: &PhantomParams,
    pose: &AffineTransform,
    geometry: &Geometry,
    noise_seed: u64,
) -> Result<Rendered> {
    params.validate()?;
    let anatomy = Anatomy { nuclei: params.nuclei.clone() };
    render(
        params,
        &anatomy,
        pose,
        geometry,
        &RenderSettings { gains: [1.0, 1.0], noise_std: params.noise_std, echoes: params.echoes, noise_seed },
    )
}

/// Generates one subject. Deterministic per `seed`.
pub fn generate_subject(params: &PhantomParams, id: &str, dataset: &str, seed: u64) -> Result<PhantomSubject> {
    params.validate()?;
    let dataset_index = DATASET_TAGS.iter().position(|t| *t == dataset).unwrap_or(0);
    let geometry = Geometry::centered(params.dims_for(dataset_index), params.spacing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = random_pose(params, &mut rng);
    let gains = [
        rng.random_range(params.gain_range[0]..=params.gain_range[1]),
        rng.random_range(params.gain_range[0]..=params.gain_range[1]),
    ];
    let noise_seed: u64 = rng.random();
    let settings = RenderSettings { gains, noise_std: params.noise_std, echoes: params.echoes, noise_seed };

    for _attempt in 0..=params.max_retries {
        let anatomy = jittered_anatomy(params, &mut rng)?;
        match render(params, &anatomy, &pose, &geometry, &settings) {
            Ok(r) => {
                if r.labels.codes().len() != 6 {
                    continue;
                }
                return Ok(PhantomSubject {
                    raw: RawSubject {
                        id: id.to_string(),
                        dataset: dataset.to_string(),
                        t1: r.t1,
                        t2_echoes: r.t2_echoes,
                        brain_mask: r.brain_mask,
                        truth: Some(r.labels),
                    },
                    nominal_centers_mm: params.nuclei.iter().map(|n| pose.apply(n.shape.center_mm)).collect(),
                    pose,
                    seed,
                });
            }
            Err(Error::Validation(m)) if m == "nuclei overlap" => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Validation(format!(
        "subject {id}: nuclei still overlap or leave the grid after {} retries",
        params.max_retries
    )))
}

/// Train/test split of `n` subjects: 3:1, seeded shuffle. Returns the
/// indices of (train, test), each ascending.
pub fn cohort_split(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 4 {
        return Err(Error::Validation(format!("cohort needs at least 4 subjects, got {n}")));
    }
    let n_test = n / 4;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Per-subject seeds derived from a cohort seed.
pub fn subject_seeds(n: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_edc0_4057);
    (0..n).map(|_| rng.random()).collect()
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{index:03}")
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub seed: u64,
    pub train: Vec<PhantomSubject>,
    pub test: Vec<PhantomSubject>,
}

/// Generates `n` subjects split 3:1 into train/test.
pub fn generate_cohort(n: usize, params: &PhantomParams, seed: u64) -> Result<Cohort> {
    let (train_idx, test_idx) = cohort_split(n, seed)?;
    let seeds = subject_seeds(n, seed);
    let make = |i: usize| generate_subject(params, &subject_id(i), DATASET_TAGS[i % DATASET_TAGS.len()], seeds[i]);
    let train = train_idx.iter().map(|&i| make(i)).collect::<Result<Vec<_>>>()?;
    let test = test_idx.iter().map(|&i| make(i)).collect::<Result<Vec<_>>>()?;
    Ok(Cohort { seed, train, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test")]
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortEntry {
    pub id: String,
    pub dataset: String,
    pub split: Split,
    pub seed: u64,
    pub pose: AffineTransform,
    pub echoes: usize,
}

/// `cohort.json`: ids, split, seeds and ground-truth poses.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortManifest {
    pub seed: u64,
    pub params: PhantomParams,
    pub subjects: Vec<CohortEntry>,
}

pub const COHORT_MANIFEST: &str = "cohort.json";

/// Writes the cohort (and template) in the NIfTI layout:
/// `subjects/<id>/{t1,t2_echo<k>,mask,labels}.nii.gz`, `template/*.nii.gz`,
/// plus `cohort.json`.
pub fn write_cohort(cohort: &Cohort, params: &PhantomParams, template: &Template, dir: &Path) -> Result<()> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    let tdir = dir.join("template");
    mkdir(&tdir)?;
    save_volume(&template.t1, tdir.join("t1.nii.gz"))?;
    save_volume(&template.t2, tdir.join("t2.nii.gz"))?;
    save_volume(&template.brain_mask, tdir.join("mask.nii.gz"))?;
    save_volume(&template.labels, tdir.join("labels.nii.gz"))?;

    let mut entries = Vec::new();
    for (split, subjects) in [(Split::Train, &cohort.train), (Split::Test, &cohort.test)] {
        for s in subjects {
            let sdir = dir.join("subjects").join(&s.raw.id);
            mkdir(&sdir)?;
            save_volume(&s.raw.t1, sdir.join("t1.nii.gz"))?;
            for (k, e) in s.raw.t2_echoes.iter().enumerate() {
                save_volume(e, sdir.join(format!("t2_echo{}.nii.gz", k + 1)))?;
            }
            save_volume(&s.raw.brain_mask, sdir.join("mask.nii.gz"))?;
            if let Some(t) = &s.raw.truth {
                save_volume(t, sdir.join("labels.nii.gz"))?;
            }
            entries.push(CohortEntry {
                id: s.raw.id.clone(),
                dataset: s.raw.dataset.clone(),
                split: split.clone(),
                seed: s.seed,
                pose: s.pose.clone(),
                echoes: s.raw.t2_echoes.len(),
            });
        }
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let manifest = CohortManifest { seed: cohort.seed, params: params.clone(), subjects: entries };
    let path = dir.join(COHORT_MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// A cohort read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedCohort {
    pub manifest: CohortManifest,
    pub train: Vec<RawSubject>,
    pub test: Vec<RawSubject>,
}

pub fn read_cohort_manifest(dir: &Path) -> Result<CohortManifest> {
    let path = dir.join(COHORT_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_subject(dir: &Path, entry: &CohortEntry) -> Result<RawSubject> {
    let sdir = dir.join("subjects").join(&entry.id);
    let truth_path = sdir.join("labels.nii.gz");
    Ok(RawSubject {
        id: entry.id.clone(),
        dataset: entry.dataset.clone(),
        t1: load_volume(sdir.join("t1.nii.gz"))?,
        t2_echoes: (1..=entry.echoes)
            .map(|k| load_volume(sdir.join(format!("t2_echo{k}.nii.gz"))))
            .collect::<Result<_>>()?,
        brain_mask: load_labels(sdir.join("mask.nii.gz"))?,
        truth: if truth_path.exists() { Some(load_labels(truth_path)?) } else { None },
    })
}

pub fn load_cohort(dir: &Path) -> Result<LoadedCohort> {
    let manifest = read_cohort_manifest(dir)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in &manifest.subjects {
        let s = load_subject(dir, e)?;
        match e.split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    Ok(LoadedCohort { manifest, train, test })
}
