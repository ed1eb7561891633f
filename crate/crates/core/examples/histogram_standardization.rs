//! Trains percentile landmarks on a few phantom subjects whose scanners
//! differ in gain, standardizes a held-out subject and prints its foreground
//! percentiles before and after.
//!
//! Usage: cargo run --release --example histogram_standardization -- [seed]

use nucleiseg::phantom::{generate_cohort, PhantomParams};
use nucleiseg::preprocess::{
    apply_brain_mask, foreground_percentiles, merge_echoes, standardize_histogram, train_landmarks, DEFAULT_PERCENTILES,
};
use nucleiseg::Volume;

fn main() -> nucleiseg::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let params = PhantomParams { dims: [96, 96, 80], ..Default::default() };
    let cohort = generate_cohort(6, &params, seed)?;
    let prep = |s: &nucleiseg::RawSubject, gain: f32| -> nucleiseg::Result<Volume> {
        apply_brain_mask(&merge_echoes(&s.t2_echoes)?.map(|v| v * gain)?, &s.brain_mask)
    };

    let train: Vec<Volume> =
        cohort.train.iter().enumerate().map(|(i, s)| prep(&s.raw, 0.6 + 0.3 * i as f32)).collect::<Result<_, _>>()?;
    let masks: Vec<_> = cohort.train.iter().map(|s| &s.raw.brain_mask).collect();
    let table = train_landmarks(&train.iter().collect::<Vec<_>>(), &masks, &DEFAULT_PERCENTILES)?;
    println!("standard scale: {:.3?}", table.standard_scale);

    for s in &cohort.test {
        let vol = prep(&s.raw, 2.5)?;
        let before = foreground_percentiles(&vol, &s.raw.brain_mask, &DEFAULT_PERCENTILES)?;
        let after = standardize_histogram(&vol, &s.raw.brain_mask, &table)?;
        let after_p = foreground_percentiles(&after, &s.raw.brain_mask, &DEFAULT_PERCENTILES)?;
        println!("{} before: {:.3?}", s.raw.id, before);
        println!("{} after:  {:.3?}", s.raw.id, after_p);
    }
    Ok(())
}
