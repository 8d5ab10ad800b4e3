use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};
use slowmo::harness::config::expand_sweep_value;
use slowmo::harness::output::read_jsonl;
use slowmo::harness::{equivalence_check, parse_config, write_run, OutputFormat};
use slowmo::numerics::problem_constants;
use slowmo::theory::{check_bound, estimate_v, expected_v, BiasMode, BoundSetup, BoundStatus};
use slowmo::{Error, ExperimentConfig, Problem, Result, Simulation};

#[derive(Parser)]
#[command(name = "slowmo", version, about = "Deterministic simulator for slow-momentum distributed optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write resolved.json, trace.jsonl and summary.csv.
    Run(RunArgs),
    /// Expand the `grid` of a sweep file and run every point.
    Sweep(RunArgs),
    /// Compare seed-averaged traces against the convergence bound.
    CheckBound(CheckBoundArgs),
    /// Compare the averaged-model sequences of two traces.
    CheckEquivalence(CheckEquivalenceArgs),
    /// Monte-Carlo estimate of the averaged-direction variance.
    EstimateV(EstimateVArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value = "both")]
    format: OutputFormat,
}

#[derive(Args)]
struct CheckBoundArgs {
    /// Trace JSONL files, one per seed.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// JSON file with the problem constants and run parameters.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    setup: Option<PathBuf>,
    /// Derive the setup from the experiment config that produced the traces.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bias term used with --config: measured or local-sgd-surrogate.
    #[arg(long, default_value = "measured", value_parser = parse_bias)]
    bias: BiasMode,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckEquivalenceArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Args)]
struct EstimateVArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
}

fn parse_bias(s: &str) -> std::result::Result<BiasMode, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown bias mode {s:?}"))
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = parse_config(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Runs to completion; on a numerical abort the partial trace is still
/// written before the error is returned.
fn run_one(cfg: &ExperimentConfig, out: &Path, format: OutputFormat) -> Result<()> {
    let mut sim = Simulation::new(cfg)?;
    let outcome = sim.run_to_end();
    write_run(out, cfg, sim.trace(), format)?;
    outcome
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = load(&args.config, args.seed)?;
    run_one(&cfg, &args.out, args.format)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_sweep(args: RunArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config).map_err(|e| Error::Io {
        path: args.config.clone(),
        source: e,
    })?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: args.config.clone(),
        source: e,
    })?;
    if let (Some(seed), Some(obj)) = (args.seed, value.as_object_mut()) {
        obj.insert("seed".into(), seed.into());
    }
    let points = expand_sweep_value(value, &args.config)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;

    let results: Vec<(String, String, Result<()>)> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let name = format!("run-{i:03}");
            let r = run_one(&p.config, &args.out.join(&name), args.format);
            (name, p.label.clone(), r)
        })
        .collect();

    let mut index = String::new();
    let mut worst: Option<Error> = None;
    for (name, label, r) in results {
        let status = match &r {
            Ok(()) => "ok".to_string(),
            Err(e) => e.to_string(),
        };
        index.push_str(&json!({"run": name, "label": label, "status": status}).to_string());
        index.push('\n');
        if let Err(e) = r {
            eprintln!("{name} ({label}): {e}");
            if worst.as_ref().is_none_or(|w| e.exit_code() > w.exit_code()) {
                worst = Some(e);
            }
        }
    }
    let index_path = args.out.join("sweep.jsonl");
    fs::write(&index_path, index).map_err(|e| Error::Io {
        path: index_path,
        source: e,
    })?;
    eprintln!("wrote {} runs to {}", points.len(), args.out.display());
    worst.map_or(Ok(()), Err)
}

fn setup_from_config(path: &Path, bias: BiasMode) -> Result<BoundSetup> {
    let cfg = parse_config(path)?;
    let lr = &cfg.slowmo.learning_rate;
    if lr.warmup_outer != 0 || !lr.milestones.is_empty() {
        return Err(Error::Config("the bound assumes a constant learning rate".into()));
    }
    let problem = Problem::build(&cfg.problem, cfg.noise, cfg.workers, cfg.seed)?;
    Ok(BoundSetup {
        constants: problem_constants(&problem)?,
        workers: cfg.workers,
        tau: cfg.slowmo.tau,
        alpha: cfg.slowmo.alpha,
        beta: cfg.slowmo.beta,
        gamma: lr.base,
        total_steps: cfg.total_steps,
        bias,
        v: None,
    })
}

fn print_json(value: &impl serde::Serialize) -> String {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    println!("{text}");
    text
}

fn cmd_check_bound(args: CheckBoundArgs) -> Result<()> {
    let setup = match (&args.setup, &args.config) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: p.clone(),
                source: e,
            })?
        }
        (None, Some(c)) => setup_from_config(c, args.bias)?,
        (None, None) => unreachable!("clap requires --setup or --config"),
    };
    let traces = args.traces.iter().map(|p| read_jsonl(p)).collect::<Result<Vec<_>>>()?;
    let report = check_bound(&traces, &setup)?;
    let text = print_json(&report);
    if let Some(out) = &args.out {
        fs::write(out, text + "\n").map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
    }
    match report.status {
        BoundStatus::Fail => Err(Error::Check(format!("LHS {} exceeds bound {}", report.lhs, report.rhs))),
        BoundStatus::ConditionNotMet => {
            eprintln!("preconditions not met: {}", report.unmet.join("; "));
            Ok(())
        }
        BoundStatus::Pass => Ok(()),
    }
}

fn cmd_check_equivalence(args: CheckEquivalenceArgs) -> Result<()> {
    let report = equivalence_check(&read_jsonl(&args.a)?, &read_jsonl(&args.b)?, args.tol);
    print_json(&report);
    if report.passed {
        Ok(())
    } else {
        Err(Error::Check(match report.diagnostic {
            Some(d) => d,
            None => format!("max difference {} exceeds {}", report.max_diff, report.tol),
        }))
    }
}

fn cmd_estimate_v(args: EstimateVArgs) -> Result<()> {
    let cfg = load(&args.config, args.seed)?;
    let problem = Problem::build(&cfg.problem, cfg.noise, cfg.workers, cfg.seed)?;
    let x = cfg.init.initial_point(problem.dim(), cfg.seed)?;
    let est = estimate_v(&problem, &cfg.base_optimizer, &cfg.protocol, &x, args.samples, cfg.seed)?;
    let expected = match cfg.base_optimizer.rule {
        slowmo::optim::OptimizerKind::PlainSgd => expected_v(&problem),
        _ => None,
    };
    let z = expected.map(|e| (est.value - e) / est.std_error);
    print_json(&json!({
        "value": est.value,
        "std_error": est.std_error,
        "samples": est.samples,
        "expected": expected,
        "z_score": z,
    }));
    match z {
        Some(z) if z.abs() > 3.0 || z.is_nan() => Err(Error::Check(format!(
            "estimate is {z:.2} standard errors from σ²/m"
        ))),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::CheckBound(a) => cmd_check_bound(a),
        Command::CheckEquivalence(a) => cmd_check_equivalence(a),
        Command::EstimateV(a) => cmd_estimate_v(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
