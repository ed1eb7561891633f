//! Recovers a known pose between a T1 phantom and a posed T2 phantom.
//!
//! Usage: cargo run --release --example register_phantom -- [trials] [seed]

use std::time::Instant;

use nucleiseg::phantom::{render_posed, PhantomParams};
use nucleiseg::preprocess::{apply_brain_mask, merge_echoes};
use nucleiseg::registration::{corner_displacement, register_affine_with_mask, RegistrationParams, SimilarityKind};
use nucleiseg::{AffineTransform, Geometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> nucleiseg::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let trials = args.first().copied().unwrap_or(4);
    let seed = args.get(1).copied().unwrap_or(7);

    let params = PhantomParams::default();
    let geom = Geometry::centered(params.dims, params.spacing)?;
    let template = render_posed(&params, &AffineTransform::identity(), &geom, seed)?;
    let t1 = apply_brain_mask(&template.t1, &template.brain_mask)?;
    let (lo, hi) = template.labels.bounding_box(|c| c != 0).unwrap();
    let lo_w = geom.index_to_world_point(lo.map(|v| v as f64));
    let hi_w = geom.index_to_world_point(hi.map(|v| v as f64));
    let voxel = params.spacing[0];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let rot: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..=10.0));
        let trans: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..=10.0));
        let scale: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.9..=1.1));
        let pose = AffineTransform::translation(trans)
            .compose(&AffineTransform::rotation_deg(rot).compose(&AffineTransform::scaling(scale)));
        let cross = trial % 2 == 0;
        let start = Instant::now();
        let posed = render_posed(&params, &pose, &geom, seed + 1 + trial)?;
        let moving = if cross { merge_echoes(&posed.t2_echoes)? } else { posed.t1.clone() };
        let moving = apply_brain_mask(&moving, &posed.brain_mask)?;
        let reg = RegistrationParams {
            similarity: if cross { SimilarityKind::NormalizedMutualInformation } else { SimilarityKind::MeanSquaredDifference },
            seed: trial,
            ..Default::default()
        };
        let rendered = start.elapsed();
        let out = register_affine_with_mask(&t1, &moving, Some(&template.brain_mask), &reg)?;
        let err = corner_displacement(&out.transform.invert()?, &pose, lo_w, hi_w);
        println!(
            "trial {trial:2} {} rot {:5.1?} err {:.3} mm ({:.2} vox) sim {:.4} -> {:.4} render {:.1?} reg {:.1?} evals {:?}",
            if cross { "nmi" } else { "msd" },
            rot,
            err,
            err / voxel,
            out.initial_similarity,
            out.final_similarity,
            rendered,
            start.elapsed() - rendered,
            out.levels.iter().map(|l| l.evaluations).collect::<Vec<_>>()
        );
    }
    Ok(())
}
