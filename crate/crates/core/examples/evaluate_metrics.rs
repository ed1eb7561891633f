//! Evaluates a deliberately perturbed prediction against phantom truth and
//! writes the report tables.
//!
//! The prediction is the truth dilated by one voxel for the right side and
//! shifted by one voxel for the left side.
//!
//! Usage: cargo run --release --example evaluate_metrics -- [out_dir]

use nucleiseg::evaluate::{emit_report, EvalCase, EvalReport};
use nucleiseg::phantom::{generate_cohort, PhantomParams};
use nucleiseg::{LabelMap, Structure};

fn perturb(truth: &LabelMap) -> LabelMap {
    let d = truth.dims();
    LabelMap::from_fn(truth.geometry().clone(), |[i, j, k]| {
        let here = truth.get(i, j, k);
        if here != 0 && here <= 3 {
            return here;
        }
        // left side moves one voxel along the first axis
        if i > 0 {
            let prev = truth.get(i - 1, j, k);
            if prev >= 4 {
                return prev;
            }
        }
        // right side grows into face neighbours
        for (a, b, c) in [(1i64, 0i64, 0i64), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
            let p = [i as i64 + a, j as i64 + b, k as i64 + c];
            if (0..3).all(|x| p[x] >= 0 && (p[x] as usize) < d[x]) {
                let v = truth.get(p[0] as usize, p[1] as usize, p[2] as usize);
                if v != 0 && v <= 3 {
                    return v;
                }
            }
        }
        0
    })
    .expect("same geometry")
}

fn main() -> nucleiseg::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    let params = PhantomParams { dims: [96, 96, 80], ..Default::default() };
    let cohort = generate_cohort(4, &params, 5)?;
    let subjects: Vec<_> = cohort.train.iter().chain(&cohort.test).map(|s| &s.raw).collect();
    let truths: Vec<&LabelMap> = subjects.iter().map(|s| s.truth.as_ref().expect("truth")).collect();
    let preds: Vec<LabelMap> = truths.iter().map(|t| perturb(t)).collect();
    let cases: Vec<EvalCase> = subjects
        .iter()
        .zip(&truths)
        .zip(&preds)
        .map(|((s, t), p)| EvalCase { subject_id: &s.id, dataset: &s.dataset, pred: p, truth: t })
        .collect();
    let report = EvalReport::build("perturbed", &cases)?;

    println!("{:<6} {:>6} {:>10} {:>10} {:>10}", "struct", "dice", "volume %", "surface %", "signed %");
    for s in Structure::ALL {
        let a = report.aggregate(s, "all").expect("aggregate");
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        println!(
            "{:<6} {:>6.3} {:>10} {:>10} {:>10}",
            s.name(),
            a.dice_mean,
            fmt(a.volume_metric_pct),
            fmt(a.surface_metric_pct),
            fmt(a.signed_offset_pct)
        );
    }
    for f in &report.fits {
        println!("V/A fit {:<10} slope {:.4} intercept {:.3} n {}", f.source, f.fit.slope, f.fit.intercept, f.fit.n);
    }
    if let Some(dir) = out {
        emit_report(&report, &dir)?;
        println!("report written to {}", dir.display());
    }
    Ok(())
}
