//! Automatic segmentation pipelines for deep-brain nuclei (red nucleus,
//! substantia nigra, subthalamic nucleus) on paired T1w/T2w MRI.
//!
//! Two pipelines share one toolkit:
//!
//! * **Method I** registers every subject to a template, segments inside a
//!   pooled template-space ROI and maps the labels back to native space
//!   through the inverse of the composed registrations, followed by
//!   Gaussian label smoothing.
//! * **Method II** never registers: a localizer predicts the combined
//!   centre of mass of the nuclei and a fixed `[78, 72, 60]` voxel window
//!   around it is segmented directly in native space.
//!
//! Everything downstream of segmentation is evaluated in native space with
//! Dice, relative volume and surface-area metrics, signed volume offsets and
//! a volume/area regression that exposes jagged label boundaries.
//! A seeded phantom generator provides subjects with exact ground truth.

pub mod error;
pub mod evaluate;
pub mod nifti;
pub mod pipeline;
pub mod phantom;
pub mod preprocess;
pub mod registration;
pub mod roi;
pub mod segment;
pub mod volume;
pub mod xform;

pub use error::{Error, Result};
pub use volume::{geometry_equal, Geometry, Grid, LabelMap, RawSubject, Structure, SubjectRecord, TransformEntry, Volume};
pub use xform::{compose, invert, AffineTransform, SmoothingSpec};
