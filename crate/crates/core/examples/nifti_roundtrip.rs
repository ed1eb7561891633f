//! Writes a phantom subject to NIfTI (.nii and .nii.gz), reads it back and
//! checks that geometry and voxel data survive unchanged.
//!
//! Usage: cargo run --release --example nifti_roundtrip -- [out_dir]

use nucleiseg::nifti::{load_labels, load_volume, save_volume};
use nucleiseg::phantom::{generate_subject, PhantomParams};
use nucleiseg::geometry_equal;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = match std::env::args().nth(1) {
        Some(d) => std::path::PathBuf::from(d),
        None => std::env::temp_dir().join("nucleiseg_nifti_roundtrip"),
    };
    std::fs::create_dir_all(&dir)?;
    let params = PhantomParams { dims: [96, 96, 80], ..Default::default() };
    let s = generate_subject(&params, "sub-000", "synth_a", 11)?.raw;
    let truth = s.truth.as_ref().expect("truth");

    for ending in ["nii", "nii.gz"] {
        let t1_path = dir.join(format!("t1.{ending}"));
        let lab_path = dir.join(format!("labels.{ending}"));
        save_volume(&s.t1, &t1_path)?;
        save_volume(truth, &lab_path)?;
        let t1 = load_volume(&t1_path)?;
        let labels = load_labels(&lab_path)?;
        let size = std::fs::metadata(&t1_path)?.len();
        println!(
            "{ending:<7} t1 {} bytes, geometry equal {}, data equal {}; labels geometry equal {}, data equal {}, codes {:?}",
            size,
            geometry_equal(t1.geometry(), s.t1.geometry(), 1e-9),
            t1.data() == s.t1.data(),
            geometry_equal(labels.geometry(), truth.geometry(), 1e-9),
            labels.data() == truth.data(),
            labels.codes()
        );
    }
    println!("files in {}", dir.display());
    Ok(())
}
