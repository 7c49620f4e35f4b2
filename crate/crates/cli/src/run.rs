//! Scenario execution and artifact files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use phbeam::{
    casimir_drift, casimir_residuals, casimir_tolerance, energy_report, energy_report_records, equilibrium_profile,
    example3_set_point, integrate_product, simulate, solve_static, Beam, CasimirCandidate, CasimirResiduals,
    ClosedLoop, ControllerParams, EnergyReport, Field, InitialCondition, Record, Scenario, SetPoint, Trace,
};

use crate::config::{ControllerChoice, InitialConfig, ScenarioConfig, DEFAULTS};
use crate::error::{CliError, Result};

pub const ARTIFACTS: [&str; 4] = ["trace.csv", "snapshots.csv", "profiles.csv", "report.txt"];

/// Summary of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunReport {
    /// `max|w(T) − w_s| / max|w_s|`; absolute when `w_s = 0`.
    pub equilibrium_error: f64,
    pub max_hcl_increment: f64,
    /// `max|𝒞(t) − 𝒞(0)|`, zero in open loop.
    pub casimir_drift: f64,
    pub u_s: f64,
    pub x1_target: f64,
    /// Seconds spent integrating.
    pub wall_time: f64,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        format!(
            "equilibrium_error = {:e}\nmax_hcl_increment = {:e}\ncasimir_drift = {:e}\nu_s = {:e}\nx1_target = {:e}\nwall_time_s = {:.3}\n",
            self.equilibrium_error, self.max_hcl_increment, self.casimir_drift, self.u_s, self.x1_target, self.wall_time
        )
    }
}

/// Beam, controller and set point built from a config.
pub struct Setup {
    pub beam: Beam,
    pub controller: Option<(ControllerChoice, SetPoint)>,
}

impl Setup {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        let beam = cfg.beam()?;
        let controller = match cfg.controller_choice()? {
            Some(choice) => {
                let sp = example3_set_point(&beam, choice.a, choice.b)?;
                Some((choice, sp))
            }
            None => None,
        };
        Ok(Self { beam, controller })
    }

    fn params(&self) -> Result<Option<ControllerParams>> {
        self.controller
            .as_ref()
            .map(|(choice, sp)| {
                ControllerParams::new(choice.gains.clone(), sp.u_s, sp.x1_target)
                    .map_err(|e| CliError::model("controller", e))
            })
            .transpose()
    }

    fn u_s(&self) -> f64 {
        self.controller.as_ref().map_or(0.0, |(_, sp)| sp.u_s)
    }

    fn target(&self) -> Field {
        match &self.controller {
            Some((choice, _)) => equilibrium_profile(choice.a, choice.b, &self.beam.params, self.beam.grid()),
            None => Field::zeros(*self.beam.grid()),
        }
    }
}

/// Runs a scenario and writes the four artifacts into `out`.
///
/// The files are written to a scratch directory next to `out` and moved
/// into place only after all of them succeeded.
pub fn run(cfg: &ScenarioConfig, out: &Path) -> Result<RunReport> {
    let setup = Setup::new(cfg)?;
    let system = match setup.params()? {
        Some(p) => ClosedLoop::new(setup.beam.clone(), p)?,
        None => ClosedLoop::open(setup.beam.clone()),
    };
    let initial = match cfg.initial {
        InitialConfig::Zero => InitialCondition::Zero,
        InitialConfig::ScaledStatic { factor } => InitialCondition::ScaledStatic(factor),
    };
    let scenario = Scenario::new(system, cfg.integrator.dt, cfg.integrator.t_end)
        .with_stride(cfg.integrator.stride)
        .with_initial(initial);
    info!("simulating {} steps on {} nodes", scenario.steps(), cfg.grid.nodes);
    let start = Instant::now();
    let trace = simulate(&scenario)?;
    let wall_time = start.elapsed().as_secs_f64();

    let w_s = solve_static(setup.u_s(), &setup.beam.profiles)?;
    let diff = trace.final_state.w.zip_map(&w_s, |a, b| a - b)?.max_abs();
    let scale = w_s.max_abs();
    let energy = energy_report(&trace);
    let report = RunReport {
        equilibrium_error: if scale > 0.0 { diff / scale } else { diff },
        max_hcl_increment: energy.max_increment,
        casimir_drift: casimir_drift(&trace).unwrap_or(0.0),
        u_s: setup.u_s(),
        x1_target: setup.controller.as_ref().map_or(0.0, |(_, sp)| sp.x1_target),
        wall_time,
    };

    let files = [
        trace_csv(&trace),
        snapshots_csv(&trace),
        profiles_csv(&setup, &w_s)?,
        report_txt(cfg, &report, &energy),
    ];
    commit(out, &files)?;
    info!("wrote {}", out.display());
    Ok(report)
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row.into_iter().map(num)).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn trace_csv(trace: &Trace) -> Vec<u8> {
    csv_bytes(
        &["t", "H", "Hc", "Hcl", "C1", "u", "uc", "yc", "int_y", "diss"],
        trace
            .records
            .iter()
            .map(|r| vec![r.t, r.h, r.hc, r.hcl, r.c1, r.u, r.u_c, r.y_c, r.int_y, r.diss]),
    )
}

pub fn snapshots_csv(trace: &Trace) -> Vec<u8> {
    let z = &trace.z;
    csv_bytes(
        &["t", "z", "w"],
        trace
            .snapshots
            .iter()
            .flat_map(|s| z.iter().zip(&s.w).map(move |(&z, &w)| vec![s.t, z, w])),
    )
}

fn profiles_csv(setup: &Setup, w_s: &Field) -> Result<Vec<u8>> {
    let p = &setup.beam.profiles;
    let w_d = setup.target();
    let z = p.grid().coordinates();
    Ok(csv_bytes(
        &["z", "Gamma", "g", "kappa", "Theta", "w_d", "w_s"],
        (0..z.len()).map(|i| vec![z[i], p.gamma[i], p.g[i], p.kappa[i], p.theta[i], w_d[i], w_s[i]]),
    ))
}

fn report_txt(cfg: &ScenarioConfig, report: &RunReport, energy: &EnergyReport) -> Vec<u8> {
    let mut s = String::new();
    s.push_str("# phbeam run\n\n[result]\n");
    s.push_str(&report.to_text());
    let _ = writeln!(s, "max_hcl = {:e}", energy.max_hcl);
    let _ = writeln!(s, "energy_rel_mismatch = {:e}", energy.rel_mismatch);
    s.push_str("\n[config]\n");
    s.push_str(&cfg.to_json());
    s.push_str("\n\n");
    s.push_str(DEFAULTS);
    s.push('\n');
    s.into_bytes()
}

fn commit(out: &Path, files: &[Vec<u8>]) -> Result<()> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| CliError::io(&parent, e))?;
    let scratch = tempfile::Builder::new()
        .prefix(".phbeam-")
        .tempdir_in(&parent)
        .map_err(|e| CliError::io(&parent, e))?;
    for (name, bytes) in ARTIFACTS.iter().zip(files) {
        let path = scratch.path().join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    }
    if !out.exists() {
        let scratch = scratch.keep();
        return fs::rename(&scratch, out).map_err(|e| {
            let _ = fs::remove_dir_all(&scratch);
            CliError::io(out, e)
        });
    }
    if !out.is_dir() {
        return Err(CliError::io(out, std::io::Error::other("exists and is not a directory")));
    }
    for name in ARTIFACTS {
        fs::rename(scratch.path().join(name), out.join(name)).map_err(|e| CliError::io(&out.join(name), e))?;
    }
    Ok(())
}

/// Residuals for the first controller state, without requiring the row
/// condition up front so that violations can be reported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CasimirCheck {
    pub residuals: CasimirResiduals,
    pub tolerance: f64,
}

impl CasimirCheck {
    pub fn verdicts(&self) -> [bool; 4] {
        self.residuals.verdicts(self.tolerance)
    }

    pub fn passes(&self) -> bool {
        self.residuals.passes(self.tolerance)
    }

    pub fn to_text(&self) -> String {
        let r = &self.residuals;
        let mut s = String::new();
        for ((name, v), ok) in [("a", r.a), ("b", r.b), ("c", r.c), ("d", r.d)].into_iter().zip(self.verdicts()) {
            let _ = writeln!(s, "condition ({name})  {v:.3e}  {}", if ok { "ok" } else { "violated" });
        }
        let _ = writeln!(s, "tolerance      {:.3e}", self.tolerance);
        let _ = writeln!(s, "verdict: {}", if self.passes() { "PASS" } else { "FAIL" });
        s
    }
}

pub fn check_casimir(cfg: &ScenarioConfig) -> Result<CasimirCheck> {
    let setup = Setup::new(cfg)?;
    let (choice, sp) = setup
        .controller
        .as_ref()
        .ok_or_else(|| CliError::validation("controller", "open loop has no Casimir candidate"))?;
    let params = ControllerParams::without_casimir_structure(choice.gains.clone(), sp.u_s, sp.x1_target)
        .map_err(|e| CliError::model("controller", e))?;
    let candidate = CasimirCandidate::example3(setup.beam.g());
    let residuals = casimir_residuals(&candidate, &setup.beam, &params).map_err(|e| CliError::model("controller", e))?;
    Ok(CasimirCheck {
        residuals,
        tolerance: casimir_tolerance(&setup.beam),
    })
}

/// Stationary voltage and the static response it produces.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticReport {
    pub set_point: SetPoint,
    pub w_s: Field,
    /// `∫ g w_s dz`, equal to the shaped target for the compliance fit.
    pub x1_static: f64,
}

impl StaticReport {
    pub fn to_text(&self) -> String {
        let w = self.w_s.values();
        let h = self.w_s.grid().spacing();
        let n = w.len();
        let slope = (3.0 * w[n - 1] - 4.0 * w[n - 2] + w[n - 3]) / (2.0 * h);
        format!(
            "u_s = {:e}\nx1_target = {:e}\nx1_static = {:e}\nfit_residual = {:e}\ntip_deflection = {:e}\ntip_slope = {:e}\n",
            self.set_point.u_s, self.set_point.x1_target, self.x1_static, self.set_point.residual, w[n - 1], slope
        )
    }
}

pub fn static_solve(cfg: &ScenarioConfig) -> Result<StaticReport> {
    let setup = Setup::new(cfg)?;
    let (_, sp) = setup
        .controller
        .as_ref()
        .ok_or_else(|| CliError::validation("controller", "open loop has no target profile"))?;
    let w_s = solve_static(sp.u_s, &setup.beam.profiles)?;
    let x1_static = integrate_product(setup.beam.g(), &w_s)?;
    Ok(StaticReport {
        set_point: *sp,
        w_s,
        x1_static,
    })
}

/// Energy bookkeeping recomputed from a written trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSummary {
    pub steps: usize,
    pub energy: EnergyReport,
    pub casimir_drift: Option<f64>,
}

impl TraceSummary {
    pub fn to_text(&self) -> String {
        let e = &self.energy;
        let mut s = format!(
            "steps = {}\nmax_hcl = {:e}\nmax_hcl_increment = {:e}\nmax_mismatch = {:e}\nrel_mismatch = {:e}\nmax_deviation = {:e}\n",
            self.steps, e.max_hcl, e.max_increment, e.max_mismatch, e.rel_mismatch, e.max_deviation
        );
        if let Some(d) = self.casimir_drift {
            let _ = writeln!(s, "casimir_drift = {d:e}");
        }
        s
    }
}

pub fn energy_report_file(path: &Path) -> Result<TraceSummary> {
    let parse_err = |message: String| CliError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => parse_err(format!("{other:?}")),
    })?;
    let header = reader.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(format!("missing column `{name}`")))
    };
    let cols = [col("t")?, col("Hcl")?, col("C1")?, col("diss")?];
    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        let mut v = [0.0; 4];
        for (slot, &c) in v.iter_mut().zip(&cols) {
            let field = row.get(c).unwrap_or("");
            *slot = field
                .parse()
                .map_err(|_| parse_err(format!("row {}: `{field}` is not a number", line + 2)))?;
        }
        records.push(Record {
            t: v[0],
            h: 0.0,
            hc: 0.0,
            hcl: v[1],
            c1: v[2],
            u: 0.0,
            u_c: 0.0,
            y_c: 0.0,
            int_y: 0.0,
            damping_states: 0.0,
            diss: v[3],
            supply: 0.0,
        });
    }
    if records.len() < 2 {
        return Err(parse_err("need at least two rows".into()));
    }
    let c0 = records[0].c1;
    let casimir_drift =
        (!c0.is_nan()).then(|| records.iter().map(|r| (r.c1 - c0).abs()).fold(0.0, f64::max));
    Ok(TraceSummary {
        steps: records.len() - 1,
        energy: energy_report_records(&records),
        casimir_drift,
    })
}
