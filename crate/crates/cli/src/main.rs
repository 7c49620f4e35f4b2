use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use log::error;
use phbeam_cli::config::DEFAULTS;
use phbeam_cli::{check_casimir, energy_report_file, load_config, run, static_solve, CliError, ScenarioConfig};

/// Simulation and energy-Casimir control of a piezo-actuated cantilever.
#[derive(Parser)]
#[command(name = "phbeam", version, after_help = HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

const HELP: &str = concat!(
    "Config files are JSON; every block is optional and unknown keys are rejected.\n",
    "Exit codes: 0 success, 1 Casimir check failed, 2 invalid input, 3 numerical failure, 4 I/O.\n",
    "Set RUST_LOG=info for progress messages."
);

#[derive(Subcommand)]
enum Command {
    /// Run scenarios and write trace.csv, snapshots.csv, profiles.csv, report.txt.
    #[command(after_help = DEFAULTS)]
    Simulate {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Output directory; with several configs, one subdirectory per config file stem.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Scenarios run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print the structural-invariant residuals and a PASS/FAIL verdict.
    #[command(after_help = DEFAULTS)]
    CheckCasimir { config: PathBuf },
    /// Print the stationary voltage and the static deflection it produces.
    #[command(after_help = DEFAULTS)]
    StaticSolve { config: PathBuf },
    /// Recompute the energy bookkeeping of a written trace.csv.
    EnergyReport { trace: PathBuf },
    /// Print the fully populated default config.
    DefaultConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

fn execute(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Simulate { configs, out, jobs } => simulate(&configs, out.as_deref(), jobs),
        Command::CheckCasimir { config } => {
            let check = check_casimir(&load_config(&config)?)?;
            print!("{}", check.to_text());
            Ok(if check.passes() { 0 } else { 1 })
        }
        Command::StaticSolve { config } => {
            print!("{}", static_solve(&load_config(&config)?)?.to_text());
            Ok(0)
        }
        Command::EnergyReport { trace } => {
            print!("{}", energy_report_file(&trace)?.to_text());
            Ok(0)
        }
        Command::DefaultConfig => {
            println!("{}", ScenarioConfig::default().to_json());
            Ok(0)
        }
    }
}

/// `--out`, then the config's `output_dir`, then `$OUT_DIR`, then `out`.
fn output_dir(cli: Option<&Path>, cfg: &ScenarioConfig, path: &Path, batch: bool) -> PathBuf {
    if let Some(dir) = cli {
        if batch {
            return dir.join(path.file_stem().unwrap_or_default());
        }
        return dir.to_path_buf();
    }
    if let Some(dir) = &cfg.output_dir {
        return dir.clone();
    }
    let base = std::env::var_os("OUT_DIR").map_or_else(|| PathBuf::from("out"), PathBuf::from);
    if batch {
        base.join(path.file_stem().unwrap_or_default())
    } else {
        base
    }
}

fn simulate(paths: &[PathBuf], out: Option<&Path>, jobs: usize) -> Result<i32, CliError> {
    let batch = paths.len() > 1;
    let mut plan = Vec::with_capacity(paths.len());
    for path in paths {
        let cfg = load_config(path)?;
        let dir = output_dir(out, &cfg, path, batch);
        if plan.iter().any(|(_, d, _): &(ScenarioConfig, PathBuf, &PathBuf)| *d == dir) {
            return Err(CliError::validation(
                "output_dir",
                format!("{} is used by more than one config", dir.display()),
            ));
        }
        plan.push((cfg, dir, path));
    }

    let next = AtomicUsize::new(0);
    let results = Mutex::new((0..plan.len()).map(|_| None).collect::<Vec<_>>());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, plan.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((cfg, dir, _)) = plan.get(i) else { break };
                let outcome = run(cfg, dir);
                results.lock().expect("no panics while locked")[i] = Some(outcome);
            });
        }
    });

    let mut code = 0;
    for ((_, dir, path), outcome) in plan.iter().zip(results.into_inner().expect("threads joined")) {
        match outcome.expect("every scenario ran") {
            Ok(report) => {
                println!("{} -> {}", path.display(), dir.display());
                print!("{}", report.to_text());
            }
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                code = code.max(e.exit_code());
            }
        }
    }
    Ok(code)
}
