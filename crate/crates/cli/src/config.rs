//! JSON scenario files.
//!
//! Every block is optional; omitted keys take the documented defaults and
//! unknown keys are rejected. A minimal file is `{}` (the worked example on
//! the default grid). Matrices are written as arrays of rows.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use phbeam::{make_grid, Beam, BeamParams, ControllerGains, ControllerParams, Grid};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Target curvature of the worked example.
pub const DEFAULT_A: f64 = 0.3587;
/// Target tip slope of the worked example.
pub const DEFAULT_B: f64 = 0.1436;

/// Human-readable list of defaults, shared by `--help` and report.txt.
pub const DEFAULTS: &str = "\
defaults:
  beam        all material constants 1, length 1, z_p 0.2, l_p 0.2, sigma 100
  controller  preset example3, a 0.3587, b 0.1436, no overrides
  grid        nodes 401
  integrator  dt 1e-3, t_end 30, stride 100
  initial     zero (beam at rest, controller at the origin)
  output_dir  --out, else the config value, else $OUT_DIR, else ./out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub beam: BeamParams,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            beam: BeamParams::unit(),
            controller: ControllerConfig::default(),
            grid: GridConfig::default(),
            integrator: IntegratorConfig::default(),
            initial: InitialConfig::Zero,
            output_dir: None,
        }
    }
}

/// Controller block, selected by `"preset"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerConfig {
    /// Worked-example gains with optional overrides.
    Example3 {
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default = "default_b")]
        b: f64,
        #[serde(default, skip_serializing_if = "GainOverrides::is_empty")]
        overrides: GainOverrides,
    },
    /// Fully specified gains; `a` and `b` still fix the target profile.
    Explicit {
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default = "default_b")]
        b: f64,
        gains: GainsConfig,
    },
    /// Open loop, no voltage.
    None,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig::Example3 {
            a: DEFAULT_A,
            b: DEFAULT_B,
            overrides: GainOverrides::default(),
        }
    }
}

fn default_a() -> f64 {
    DEFAULT_A
}

fn default_b() -> f64 {
    DEFAULT_B
}

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsConfig {
    pub j: Rows,
    pub r: Rows,
    pub g: Rows,
    pub k: Rows,
    pub m: Rows,
    pub c1: f64,
}

impl GainsConfig {
    fn to_gains(&self) -> Result<ControllerGains> {
        Ok(ControllerGains {
            j: matrix("controller.gains.j", &self.j)?,
            r: matrix("controller.gains.r", &self.r)?,
            g: matrix("controller.gains.g", &self.g)?,
            k: matrix("controller.gains.k", &self.k)?,
            m: matrix("controller.gains.m", &self.m)?,
            c1: self.c1,
        })
    }
}

/// Entries replacing parts of the preset gains.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
}

impl GainOverrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    fn apply(&self, mut gains: ControllerGains) -> Result<ControllerGains> {
        let slots = [
            (&self.j, &mut gains.j, "j"),
            (&self.r, &mut gains.r, "r"),
            (&self.g, &mut gains.g, "g"),
            (&self.k, &mut gains.k, "k"),
            (&self.m, &mut gains.m, "m"),
        ];
        for (rows, slot, name) in slots {
            if let Some(rows) = rows {
                *slot = matrix(&format!("controller.overrides.{name}"), rows)?;
            }
        }
        if let Some(c1) = self.c1 {
            gains.c1 = c1;
        }
        Ok(gains)
    }
}

fn matrix(key: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 {
        return Err(CliError::validation(key, "matrix must be non-empty"));
    }
    if rows.iter().any(|r| r.len() != nc) {
        return Err(CliError::validation(key, "rows must have equal length"));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl From<&ControllerGains> for GainsConfig {
    fn from(g: &ControllerGains) -> Self {
        Self {
            j: rows(&g.j),
            r: rows(&g.r),
            g: rows(&g.g),
            k: rows(&g.k),
            m: rows(&g.m),
            c1: g.c1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub nodes: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { nodes: 401 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Snapshot every `stride` steps.
    pub stride: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_end: 30.0,
            stride: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    #[default]
    Zero,
    /// `factor · w_s` at rest.
    ScaledStatic { factor: f64 },
}

/// Controller gains and target parameters resolved from the config.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerChoice {
    pub gains: ControllerGains,
    pub a: f64,
    pub b: f64,
}

impl ScenarioConfig {
    pub fn grid(&self) -> Result<Grid> {
        make_grid(self.beam.length, self.grid.nodes).map_err(|e| CliError::model("grid", e))
    }

    pub fn beam(&self) -> Result<Beam> {
        Beam::new(self.beam, self.grid()?).map_err(|e| CliError::model("beam", e))
    }

    /// Gains and target, or `None` for an open-loop run.
    pub fn controller_choice(&self) -> Result<Option<ControllerChoice>> {
        let (gains, a, b) = match &self.controller {
            ControllerConfig::Example3 { a, b, overrides } => (overrides.apply(ControllerGains::example3())?, *a, *b),
            ControllerConfig::Explicit { a, b, gains } => (gains.to_gains()?, *a, *b),
            ControllerConfig::None => return Ok(None),
        };
        Ok(Some(ControllerChoice { gains, a, b }))
    }

    /// Checks every key without building the beam. The row condition on
    /// `J − R` is left to the commands that need it.
    pub fn validate(&self) -> Result<()> {
        self.beam.validate().map_err(|e| CliError::model("beam", e))?;
        let grid = self.grid()?;
        let sigma_h = self.beam.sigma * grid.spacing();
        if sigma_h > 0.5 {
            return Err(CliError::Numerical(phbeam::Error::Resolution { sigma_h }));
        }
        let it = &self.integrator;
        if !(it.dt > 0.0 && it.dt.is_finite()) {
            return Err(CliError::validation("integrator.dt", "must be positive and finite"));
        }
        if !(it.t_end.is_finite() && it.t_end >= it.dt) {
            return Err(CliError::validation("integrator.t_end", "must be finite and at least one step"));
        }
        if it.stride == 0 {
            return Err(CliError::validation("integrator.stride", "must be at least 1"));
        }
        if let Some(choice) = self.controller_choice()? {
            for (key, v) in [("controller.a", choice.a), ("controller.b", choice.b)] {
                if !v.is_finite() {
                    return Err(CliError::validation(key, "must be finite"));
                }
            }
            ControllerParams::without_casimir_structure(choice.gains, 0.0, 0.0)
                .map_err(|e| CliError::model("controller", e))?;
        }
        if let InitialConfig::ScaledStatic { factor } = self.initial {
            if !factor.is_finite() {
                return Err(CliError::validation("initial.factor", "must be finite"));
            }
            if self.controller == ControllerConfig::None {
                return Err(CliError::validation(
                    "initial",
                    "a scaled static start needs a controller voltage",
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses and validates a config from JSON text; `origin` labels errors.
pub fn parse_config(text: &str, origin: &Path) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| CliError::Parse {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text, path)
}

pub fn write_config(cfg: &ScenarioConfig, path: &Path) -> Result<()> {
    fs::write(path, cfg.to_json() + "\n").map_err(|e| CliError::io(path, e))
}
