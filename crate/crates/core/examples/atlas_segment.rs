//! Segments one phantom subject with another as the atlas: the atlas T2 is
//! registered to the target T2 and its labels are pulled across.
//!
//! Usage: cargo run --release --example atlas_segment -- [seed]

use nucleiseg::evaluate::dice_all;
use nucleiseg::phantom::{generate_subject, subject_seeds, PhantomParams};
use nucleiseg::preprocess::{apply_brain_mask, merge_echoes};
use nucleiseg::registration::RegistrationParams;
use nucleiseg::segment::{AtlasModel, Segmenter, SegmenterInput};
use nucleiseg::Structure;

fn main() -> nucleiseg::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(9);
    let params = PhantomParams::default();
    let seeds = subject_seeds(2, seed);
    let atlas = generate_subject(&params, "atlas", "synth_a", seeds[0])?.raw;
    let target = generate_subject(&params, "target", "synth_b", seeds[1])?.raw;

    let atlas_t2 = apply_brain_mask(&merge_echoes(&atlas.t2_echoes)?, &atlas.brain_mask)?;
    let model = AtlasModel::new("atlas", atlas_t2, atlas.truth.clone().expect("truth"), RegistrationParams::msd())?;
    let t1 = apply_brain_mask(&target.t1, &target.brain_mask)?;
    let t2 = apply_brain_mask(&merge_echoes(&target.t2_echoes)?, &target.brain_mask)?;
    let start = std::time::Instant::now();
    let pred = model.segment(&SegmenterInput { id: "target", t1: &t1, t2: &t2 })?;
    let d = dice_all(&pred, target.truth.as_ref().expect("truth"))?;
    println!("segmented with {} in {:.1}s", model.name(), start.elapsed().as_secs_f64());
    for (s, v) in Structure::ALL.iter().zip(d) {
        println!("{:<6} dice {:.3}", s.name(), v);
    }
    Ok(())
}
