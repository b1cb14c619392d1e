use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use bernstein_lab::cli::{exit_code_of, parse_ladder, run, ExperimentConfig, Stage};

#[derive(Debug, Parser)]
#[command(name = "bernstein-lab", version, about = "Reversible diffusions on boxes: solve, simulate, verify")]
struct Args {
    /// Pipeline stage to run; earlier stages run as needed.
    #[arg(value_enum)]
    stage: Stage,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `mc.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Refinement ladder as "h1,dt1;h2,dt2;...".
    #[arg(long)]
    ladder: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

fn load(args: &Args) -> bernstein_lab::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed)?;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(l) = &args.ladder {
        cfg.ladder = parse_ladder(l)?;
    }
    if args.workers.is_some() {
        cfg.workers = args.workers;
    }
    cfg.stages = vec![args.stage];
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match load(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code_of(&e) as u8);
        }
    };
    let outcome = run(&cfg);
    for c in &outcome.report.checks {
        let tag = match (c.pass, c.hard) {
            (true, _) => "pass",
            (false, true) => "FAIL",
            (false, false) => "note",
        };
        println!("{tag} {:<40} {:>12.4e} (threshold {:.4e})", c.name, c.value, c.threshold);
    }
    if let Some(f) = &outcome.report.failure {
        eprintln!("error (exit {}): {}", f.exit_code, f.message);
    }
    println!("report written to {}", cfg.out.display());
    ExitCode::from(outcome.exit_code as u8)
}
