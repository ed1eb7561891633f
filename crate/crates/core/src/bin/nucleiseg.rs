use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nucleiseg::evaluate::{emit_report, load_report};
use nucleiseg::phantom::{generate_cohort, generate_template, write_cohort, PhantomParams};
use nucleiseg::pipeline::{
    compare, emit_comparison, evaluate_predictions, export_trainer, preprocess_cohort, run, Method, PipelineConfig,
    SegmenterKind,
};
use nucleiseg::{Error, Result};

#[derive(Parser)]
#[command(name = "nucleiseg", version, about = "Deep-brain nuclei segmentation pipelines on phantom or real cohorts")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic cohorts.
    Phantom {
        #[command(subcommand)]
        action: PhantomAction,
    },
    /// Merge echoes and apply brain masks for every cohort subject.
    Preprocess,
    /// Run one pipeline end to end.
    Run { method: MethodArg },
    /// Write the preprocessed segmentation inputs in the external trainer layout.
    ExportTrainer,
    /// Finish a run from external ROI predictions.
    ImportPredictions {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Evaluate native-space predictions against cohort truth.
    Evaluate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "external")]
        method: String,
    },
    /// Side-by-side comparison of two report.json files.
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(Subcommand)]
enum PhantomAction {
    Gen {
        #[arg(long, default_value_t = 12)]
        n: usize,
        /// Grid dims, e.g. 160,160,160.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        /// Phantom parameters (JSON); defaults otherwise.
        #[arg(long)]
        params: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Method1,
    Method2,
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(require(&g.config, "config")?)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(o) = &g.out {
        cfg.paths.work_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn summarize(cfg: &PipelineConfig) -> Result<()> {
    let out = run(cfg)?;
    println!(
        "{}: {} test subjects, mean dice {:.4}, {} flags",
        out.report.method,
        out.report.subject_ids().len(),
        out.report.mean_dice(),
        out.report.flags.len()
    );
    for f in &out.report.flags {
        println!("  flag {} {}: {}", f.subject_id, f.kind, f.detail);
    }
    if let Some(d) = &cfg.paths.work_dir {
        println!("outputs in {}", d.display());
    }
    Ok(())
}

fn phantom_gen(g: &Global, n: usize, dims: Option<Vec<usize>>, params: Option<&Path>) -> Result<()> {
    let out = require(&g.out, "out")?;
    let mut p = match params {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)?
        }
        None => PhantomParams::default(),
    };
    if let Some(d) = dims {
        p.dims = d
            .try_into()
            .map_err(|d: Vec<usize>| Error::Config(format!("--dims needs three values, got {d:?}")))?;
    }
    let seed = g.seed.unwrap_or(0);
    let cohort = generate_cohort(n, &p, seed)?;
    let template = generate_template(&p)?;
    write_cohort(&cohort, &p, &template, out)?;
    println!("{} train / {} test subjects written to {}", cohort.train.len(), cohort.test.len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Phantom { action: PhantomAction::Gen { n, dims, params } } => phantom_gen(g, n, dims, params.as_deref()),
        Command::Preprocess => {
            let cfg = load_config(g)?;
            let out = require(&g.out, "out")?;
            let ids = preprocess_cohort(&cfg, out)?;
            println!("{} subjects written to {}", ids.len(), out.display());
            Ok(())
        }
        Command::Run { method } => {
            let mut cfg = load_config(g)?;
            cfg.method = match method {
                MethodArg::Method1 => Method::Method1,
                MethodArg::Method2 => Method::Method2,
            };
            summarize(&cfg)
        }
        Command::ExportTrainer => {
            let cfg = load_config(g)?;
            let out = require(&g.out, "out")?;
            let p = export_trainer(&cfg, out)?;
            println!(
                "{}: {} training cases ({} augmented), {} test cases in {}",
                p.method.name(),
                p.train.len() + p.augmented.len(),
                p.augmented.len(),
                p.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::ImportPredictions { predictions } => {
            let mut cfg = load_config(g)?;
            cfg.segmenter.kind = SegmenterKind::External;
            cfg.segmenter.predictions = Some(predictions);
            summarize(&cfg)
        }
        Command::Evaluate { cohort, predictions, method } => {
            let report = evaluate_predictions(&method, &cohort, &predictions)?;
            println!("{}: mean dice {:.4}", report.method, report.mean_dice());
            if let Some(out) = &g.out {
                emit_report(&report, out)?;
            }
            Ok(())
        }
        Command::Compare { a, b } => {
            let c = compare(&load_report(&a)?, &load_report(&b)?)?;
            for r in &c.rows {
                println!(
                    "{:<6} {:<20} {:>10.4} {:>10.4} {}",
                    r.structure, r.metric, r.value_a, r.value_b, r.better
                );
            }
            if let Some(out) = &g.out {
                emit_comparison(&c, out)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
