//! `phantom-grad`: runs the experiment grids and writes tidy CSV plus a
//! manifest that reproduces the run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use phantom_grad::config::{from_map, ConfigMap, FromConfig, RunManifest, Table};
use phantom_grad::experiments::{
    run_fd_check, run_precision_sweep, run_stability_study, run_theory_grid, run_training_benchmark, FdCheckSpec,
    RunOutput, StabilitySpec, SweepSpec, TrainBenchSpec,
};

#[derive(Parser)]
#[command(
    name = "phantom-grad",
    version,
    about = "Exact and phantom gradients of implicit fixed-point layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cosine of UPG/NPG against the exact gradient over a (k, lambda) grid.
    PrecisionSweep(RunArgs),
    /// Broyden adjoint traces against phantom adjoints at matched budgets.
    Stability(RunArgs),
    /// Ascent-condition and Neumann-truncation checks on small dense instances.
    TheoryGrid(RunArgs),
    /// SGD training with several gradient oracles; also writes timings.csv.
    TrainBench(RunArgs),
    /// Central finite differences against a gradient oracle.
    FdCheck(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; output does not depend on this.
    #[arg(long, default_value_t = default_workers(), value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
}

fn default_workers() -> u64 {
    std::thread::available_parallelism()
        .map(|n| n.get() as u64)
        .unwrap_or(1)
}

/// Any error that stops a run before its outputs are written; exit code 1.
struct Failure(String);

struct Completed {
    rows: Table,
    extra: Vec<(&'static str, Table)>,
    flagged: usize,
}

impl From<RunOutput> for Completed {
    fn from(out: RunOutput) -> Self {
        Completed {
            rows: out.table,
            extra: Vec::new(),
            flagged: out.flagged,
        }
    }
}

fn load<T: FromConfig>(args: &RunArgs, seed_key: &str) -> Result<(T, Loaded), Failure> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Failure(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut map = ConfigMap::parse(&text).map_err(|e| Failure(format!("config: {e}")))?;
    if let Some(seed) = args.seed {
        map.set(seed_key, seed);
    }
    let (spec, echo) = from_map::<T>(&map).map_err(|e| Failure(format!("config: {e}")))?;
    let seed = echo.get(seed_key).and_then(|s| s.parse().ok()).unwrap_or(0);
    Ok((spec, Loaded { seed, echo }))
}

struct Loaded {
    seed: u64,
    echo: std::collections::BTreeMap<String, String>,
}

fn execute(name: &str, args: &RunArgs, command: &Command) -> Result<usize, Failure> {
    let workers = args.workers as usize;
    let runtime = |e: phantom_grad::experiments::ExperimentError| Failure(e.to_string());
    let (mut manifest, done) = match command {
        Command::PrecisionSweep(_) => {
            let (spec, m) = load::<SweepSpec>(args, "seed")?;
            let manifest = RunManifest::new(name, m.seed, m.echo);
            let out = run_precision_sweep(&spec, &manifest.config_hash, workers).map_err(runtime)?;
            (manifest, Completed::from(out))
        }
        Command::Stability(_) => {
            let (spec, m) = load::<StabilitySpec>(args, "seed")?;
            let manifest = RunManifest::new(name, m.seed, m.echo);
            let out = run_stability_study(&spec, &manifest.config_hash, workers).map_err(runtime)?;
            (manifest, Completed::from(out))
        }
        Command::TheoryGrid(_) => {
            let (spec, m) = load::<TheoryGridSpec>(args, "seed")?;
            let manifest = RunManifest::new(name, m.seed, m.echo);
            let out = run_theory_grid(&spec.0, &manifest.config_hash, workers).map_err(runtime)?;
            (manifest, Completed::from(out))
        }
        Command::TrainBench(_) => {
            let (spec, m) = load::<TrainBenchSpec>(args, "dataset_seed")?;
            let manifest = RunManifest::new(name, m.seed, m.echo);
            let out = run_training_benchmark(&spec.configs(), &manifest.config_hash, workers, spec.smoothing_window)
                .map_err(runtime)?;
            (
                manifest,
                Completed {
                    rows: out.rows.table,
                    extra: vec![("timings.csv", out.timings)],
                    flagged: out.rows.flagged,
                },
            )
        }
        Command::FdCheck(_) => {
            let (spec, m) = load::<FdCheckSpec>(args, "seed")?;
            let manifest = RunManifest::new(name, m.seed, m.echo);
            let out = run_fd_check(&spec, &manifest.config_hash, workers).map_err(runtime)?;
            (manifest, Completed::from(out))
        }
    };
    manifest.rows = done.rows.rows.len();
    manifest.flagged_failures = done.flagged;
    manifest.finished_unix_ms = phantom_grad::config::unix_millis();
    write_outputs(&args.out, &manifest, &done).map_err(|e| Failure(format!("{}: {e}", args.out.display())))?;
    println!(
        "{name}: {} rows, {} flagged, config {} -> {}",
        manifest.rows,
        manifest.flagged_failures,
        manifest.config_hash,
        args.out.display()
    );
    Ok(done.flagged)
}

/// The theory grid reads the sweep keys with its own defaults.
struct TheoryGridSpec(SweepSpec);

impl FromConfig for TheoryGridSpec {
    fn read(r: &mut phantom_grad::config::ConfigReader<'_>) -> Result<Self, phantom_grad::config::ConfigError> {
        phantom_grad::experiments::read_sweep(r, &SweepSpec::theory_defaults()).map(TheoryGridSpec)
    }
}

fn write_outputs(dir: &Path, manifest: &RunManifest, done: &Completed) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    done.rows.write_file(&dir.join("rows.csv"))?;
    for (file, table) in &done.extra {
        table.write_file(&dir.join(file))?;
    }
    std::fs::write(dir.join("manifest.json"), manifest.to_json() + "\n")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, args) = match &cli.command {
        Command::PrecisionSweep(a) => ("precision-sweep", a),
        Command::Stability(a) => ("stability", a),
        Command::TheoryGrid(a) => ("theory-grid", a),
        Command::TrainBench(a) => ("train-bench", a),
        Command::FdCheck(a) => ("fd-check", a),
    };
    match execute(name, args, &cli.command) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(2),
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
