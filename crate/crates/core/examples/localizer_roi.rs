//! Fits the centre-of-mass localizer on training subjects, predicts the
//! nuclei centre for held-out subjects, crops the fixed ROI window and
//! checks that every nucleus lies inside it.
//!
//! Usage: cargo run --release --example localizer_roi -- [subjects] [seed]

use nucleiseg::phantom::{generate_cohort, PhantomParams};
use nucleiseg::roi::{centroid_offset, compute_com, crop_roi, predict_com, restore_from_roi, LocalizerModel, DEFAULT_ROI_SHAPE};

fn main() -> nucleiseg::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n = args.first().copied().unwrap_or(16) as usize;
    let seed = args.get(1).copied().unwrap_or(2024);

    let params = PhantomParams::default();
    let cohort = generate_cohort(n, &params, seed)?;
    let offsets = cohort
        .train
        .iter()
        .map(|s| centroid_offset(&s.raw.brain_mask, s.raw.truth.as_ref().expect("truth")))
        .collect::<nucleiseg::Result<Vec<_>>>()?;
    let model = LocalizerModel::from_offsets(&offsets)?;
    println!(
        "localizer from {} subjects: offset {:.2?} mm, residual std {:.2?} mm",
        offsets.len(),
        model.mean_offset_mm,
        model.residual_std_mm
    );

    for s in &cohort.test {
        let truth = s.raw.truth.as_ref().expect("truth");
        let predicted = predict_com(&model, &s.raw.brain_mask)?;
        let actual = compute_com(truth)?;
        let err: f64 = (0..3).map(|a| (predicted.world[a] - actual.world[a]).powi(2)).sum::<f64>().sqrt();
        let (roi_labels, window) = crop_roi(truth, &predicted, DEFAULT_ROI_SHAPE)?;
        let restored = restore_from_roi(&roi_labels, &window, truth.geometry())?;
        println!(
            "{} com error {:.2} mm, window start {:?}, contained {}, restored identical {}",
            s.raw.id,
            err,
            window.start,
            window.contains_labels(truth),
            restored.data() == truth.data()
        );
    }
    Ok(())
}
