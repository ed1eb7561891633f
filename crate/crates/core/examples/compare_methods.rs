//! Runs both pipelines on one phantom cohort and prints the side-by-side
//! comparison table.
//!
//! Usage: cargo run --release --example compare_methods -- [subjects] [seed] [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use nucleiseg::phantom::{generate_cohort, generate_template, PhantomParams};
use nucleiseg::pipeline::{compare, emit_comparison, run_with, Method, PipelineConfig, PipelineInputs, TemplateImage};

fn main() -> nucleiseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().and_then(|a| a.parse().ok()).unwrap_or(12);
    let seed: u64 = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(2024);
    let out = args.get(2).map(PathBuf::from);

    let params = PhantomParams::default();
    let start = Instant::now();
    let cohort = generate_cohort(n, &params, seed)?;
    let template = generate_template(&params)?;
    println!("cohort of {n} generated in {:.1}s", start.elapsed().as_secs_f64());
    let inputs = PipelineInputs {
        train: cohort.train.into_iter().map(|s| s.raw).collect(),
        test: cohort.test.into_iter().map(|s| s.raw).collect(),
        template: Some(TemplateImage { t1: template.t1, mask: Some(template.brain_mask) }),
    };

    let mut reports = Vec::new();
    for method in [Method::Method1, Method::Method2] {
        let config = PipelineConfig { method, seed, ..Default::default() };
        let start = Instant::now();
        let run = run_with(inputs.clone(), &config)?;
        println!(
            "{}: mean dice {:.3} over {} test subjects, {} flags, {:.1}s",
            method.name(),
            run.report.mean_dice(),
            run.report.subject_ids().len(),
            run.report.flags.len(),
            start.elapsed().as_secs_f64()
        );
        reports.push(run.report);
    }

    let table = compare(&reports[0], &reports[1])?;
    println!("{:<6} {:<20} {:>10} {:>10} {:>7}", "struct", "metric", "method1", "method2", "better");
    for r in &table.rows {
        println!("{:<6} {:<20} {:>10.3} {:>10.3} {:>7}", r.structure, r.metric, r.value_a, r.value_b, r.better);
    }
    if let Some(dir) = out {
        emit_comparison(&table, &dir)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}
