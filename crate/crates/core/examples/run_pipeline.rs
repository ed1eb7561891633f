//! Runs one pipeline end to end on a fresh phantom cohort and writes the
//! report, manifest and native-space predictions.
//!
//! Usage: cargo run --release --example run_pipeline -- [method1|method2] [subjects] [seed] [out_dir]

use std::path::PathBuf;

use nucleiseg::phantom::{generate_cohort, generate_template, PhantomParams};
use nucleiseg::pipeline::{run_with, write_outputs, Method, PipelineConfig, PipelineInputs, TemplateImage};
use nucleiseg::Structure;

fn main() -> nucleiseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let method: Method = args.first().map(|m| m.parse()).transpose()?.unwrap_or(Method::Method2);
    let n: usize = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(8);
    let seed: u64 = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(2024);
    let out = args.get(3).map(PathBuf::from);

    let params = PhantomParams::default();
    let cohort = generate_cohort(n, &params, seed)?;
    let template = generate_template(&params)?;
    let inputs = PipelineInputs {
        train: cohort.train.into_iter().map(|s| s.raw).collect(),
        test: cohort.test.into_iter().map(|s| s.raw).collect(),
        template: Some(TemplateImage { t1: template.t1, mask: Some(template.brain_mask) }),
    };
    let config = PipelineConfig { method, seed, ..Default::default() };
    let start = std::time::Instant::now();
    let run = run_with(inputs, &config)?;
    println!("{} finished in {:.1}s, stages: {}", method.name(), start.elapsed().as_secs_f64(), run.manifest.stages.join(" > "));
    for s in Structure::ALL {
        let a = run.report.aggregate(s, "all").expect("aggregate");
        println!(
            "{:<6} dice {:.3} volume {:.2}% surface {:.2}%",
            s.name(),
            a.dice_mean,
            a.volume_metric_pct.unwrap_or(f64::NAN),
            a.surface_metric_pct.unwrap_or(f64::NAN)
        );
    }
    for f in &run.report.flags {
        println!("flag {} {}: {}", f.subject_id, f.kind, f.detail);
    }
    if let Some(dir) = out {
        write_outputs(&run, &dir)?;
        println!("outputs written to {}", dir.display());
    }
    Ok(())
}
