//! Run configuration: JSON schema, validation and builders.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::binding::{NodeSet, PicardOptions};
use crate::geometry::{norm, Point};
use crate::kernels::{AdhesionPotential, InteractionKernel, Modulation, ProfileKind, RadialProfile};
use crate::analysis::zkb_solution;
use crate::measures::{Grid, GridField};
use crate::pm_solver::{Chi, SolverConfig};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub a_plus: f64,
    pub a_minus: f64,
    pub b_plus: f64,
    pub b_minus: f64,
    pub k_plus: Modulation,
    pub k_minus: Modulation,
    #[serde(default)]
    pub symmetric: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            a_plus: 1.0,
            a_minus: 1.0,
            b_plus: 2.0,
            b_minus: 2.0,
            k_plus: Modulation::Constant { value: 4.0 },
            k_minus: Modulation::Constant { value: 1.0 },
            symmetric: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    /// `μ0` is the initial density itself.
    Field,
    /// `μ0 = m δ0` with the closed-form profile.
    PointMass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BindingConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    pub rho: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_relaxation")]
    pub relaxation: f64,
    #[serde(default = "one")]
    pub resolve_every: usize,
    #[serde(default = "default_samples")]
    pub certificate_samples: usize,
    #[serde(default = "default_anchor")]
    pub anchor: AnchorKind,
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn default_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    500
}
fn default_relaxation() -> f64 {
    0.5
}
fn default_samples() -> usize {
    24
}
fn default_anchor() -> AnchorKind {
    AnchorKind::Field
}

impl BindingConfig {
    pub fn picard(&self) -> PicardOptions {
        PicardOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            relaxation: self.relaxation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    /// `(1 - |x|²/r²)₊²`, scaled to `mass`.
    Bump { radius: f64, mass: f64 },
    /// Source solution at time `t0`.
    Zkb { t0: f64, c: f64 },
    /// `λ^d v(λ x)` for the unit bump `v` of the given mass.
    RescaledBump { mass: f64, lambda: f64 },
    /// Cell values read from a CSV file in the snapshot format.
    File { path: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TimeMarching,
    GlobalPicard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub t_end: f64,
    #[serde(default)]
    pub output_interval: Option<f64>,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    /// Proceed when the initial datum fails the admissibility checks.
    #[serde(default)]
    pub allow_inadmissible: bool,
    /// Stop at the user horizon even if it exceeds the certified one; monitors stay active.
    #[serde(default)]
    pub ignore_horizon: bool,
    #[serde(default = "default_picard_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
}

fn default_mode() -> Mode {
    Mode::TimeMarching
}
fn default_picard_tol() -> f64 {
    1e-10
}
fn default_max_outer() -> usize {
    40
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default)]
    pub epsilon: f64,
    pub h: f64,
    #[serde(default)]
    pub domain_radius: Option<f64>,
    #[serde(default = "default_safety")]
    pub cfl_safety: f64,
    #[serde(default = "default_chi")]
    pub chi: Chi,
    #[serde(default)]
    pub mollifier_eps: f64,
}

fn default_safety() -> f64 {
    0.45
}
fn default_chi() -> Chi {
    Chi::Zero
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema: u32,
    pub dimension: usize,
    #[serde(default)]
    pub kernels: KernelConfig,
    #[serde(default = "default_profile")]
    pub adhesion: ProfileKind,
    #[serde(default)]
    pub binding: Option<BindingConfig>,
    pub solver: SolverSection,
    pub initial: InitialConfig,
    pub run: RunConfig,
}

fn default_profile() -> ProfileKind {
    ProfileKind::Constant { value: 1.0 }
}

impl Config {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: Config = serde_json::from_value(v).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::validation("schema", format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema)));
        }
        if !(1..=3).contains(&self.dimension) {
            return Err(Error::validation("dimension", "must be 1, 2 or 3"));
        }
        RadialProfile::new(self.adhesion.clone())?;
        if let Some(b) = self.binding.as_ref().filter(|b| b.enabled) {
            if !(b.rho > 0.0 && b.rho < 0.5) {
                return Err(Error::validation("binding.rho", "must satisfy 0 < rho < 1/2"));
            }
            if !(b.tol > 0.0) {
                return Err(Error::validation("binding.tol", "must be positive"));
            }
            if b.max_iter == 0 {
                return Err(Error::validation("binding.max_iter", "must be at least 1"));
            }
            if !(b.relaxation > 0.0 && b.relaxation <= 1.0) {
                return Err(Error::validation("binding.relaxation", "must lie in (0, 1]"));
            }
            if b.resolve_every == 0 {
                return Err(Error::validation("binding.resolve_every", "must be at least 1"));
            }
            self.kernel(b.rho)?;
            if b.rho < self.solver.h {
                return Err(Error::validation("binding.rho", "must be at least one grid spacing"));
            }
        }
        match &self.initial {
            InitialConfig::Bump { radius, mass } => {
                if !(*radius > 0.0) {
                    return Err(Error::validation("initial.radius", "must be positive"));
                }
                if !(*mass > 0.0) {
                    return Err(Error::validation("initial.mass", "must be positive"));
                }
            }
            InitialConfig::Zkb { t0, c } => {
                if !(*t0 > 0.0 && *c > 0.0) {
                    return Err(Error::validation("initial", "zkb needs t0 > 0 and c > 0"));
                }
            }
            InitialConfig::RescaledBump { mass, lambda } => {
                if !(*mass > 0.0 && *lambda >= 1.0) {
                    return Err(Error::validation("initial", "rescaled bump needs mass > 0 and lambda >= 1"));
                }
            }
            InitialConfig::File { path } => {
                if path.is_empty() {
                    return Err(Error::validation("initial.path", "must not be empty"));
                }
            }
        }
        if !(self.run.t_end >= 0.0 && self.run.t_end.is_finite()) {
            return Err(Error::validation("run.t_end", "must be finite and nonnegative"));
        }
        if let Some(dt) = self.run.output_interval {
            if !(dt > 0.0) {
                return Err(Error::validation("run.output_interval", "must be positive"));
            }
        }
        if !(self.run.picard_tol > 0.0) {
            return Err(Error::validation("run.picard_tol", "must be positive"));
        }
        self.solver_config_with_radius(self.solver.domain_radius.unwrap_or(1.0 + 4.0 * self.solver.h))?
            .validate()
    }

    /// Binding kernel on the ball of radius `rho`; pair distances reach `2 rho`.
    pub fn kernel(&self, rho: f64) -> Result<InteractionKernel> {
        let k = &self.kernels;
        InteractionKernel::new(
            k.a_plus,
            k.a_minus,
            k.b_plus,
            k.b_minus,
            k.k_plus.clone(),
            k.k_minus.clone(),
            k.symmetric,
            2.0 * rho,
        )
    }

    pub fn potential(&self) -> Result<AdhesionPotential> {
        Ok(AdhesionPotential::new(self.dimension, RadialProfile::new(self.adhesion.clone())?))
    }

    pub fn nodes(&self) -> Result<Option<Arc<NodeSet>>> {
        match self.binding.as_ref().filter(|b| b.enabled) {
            Some(b) => Ok(Some(NodeSet::new(self.dimension, self.solver.h, b.rho)?)),
            None => Ok(None),
        }
    }

    fn solver_config_with_radius(&self, radius: f64) -> Result<SolverConfig> {
        let s = &self.solver;
        let cfg = SolverConfig {
            epsilon: s.epsilon,
            h: s.h,
            domain_radius: radius,
            cfl_safety: s.cfl_safety,
            chi: s.chi,
            mollifier_eps: s.mollifier_eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Radius of the initial support before discretisation.
    pub fn initial_support(&self) -> Option<f64> {
        match &self.initial {
            InitialConfig::Bump { radius, .. } => Some(*radius),
            InitialConfig::Zkb { t0, c } => Some(crate::analysis::zkb_radius(*t0, *c, self.dimension)),
            InitialConfig::RescaledBump { lambda, .. } => Some(1.0 / lambda),
            InitialConfig::File { .. } => None,
        }
    }

    pub fn solver_config(&self, u0_support: f64) -> Result<SolverConfig> {
        let radius = self.solver.domain_radius.unwrap_or(u0_support + 2.0);
        if radius < u0_support + 1.0 + 4.0 * self.solver.h {
            return Err(Error::validation(
                "solver.domain_radius",
                format!("must be at least support radius + 1 + 4h = {}", u0_support + 1.0 + 4.0 * self.solver.h),
            ));
        }
        self.solver_config_with_radius(radius)
    }

    /// Grid and initial field; `csv` supplies cell values for file-based data.
    pub fn initial_field(&self, csv: Option<&str>) -> Result<GridField> {
        let d = self.dimension;
        let h = self.solver.h;
        let field = match &self.initial {
            InitialConfig::File { .. } => {
                let text = csv.ok_or_else(|| Error::validation("initial.path", "file contents were not supplied"))?;
                let pts = parse_field_csv(text, d)?;
                let support = pts.iter().filter(|p| p.1 > 0.0).map(|p| norm(&p.0)).fold(0.0, f64::max);
                let grid = Arc::new(Grid::new(d, h, self.solver_config(support)?.domain_radius)?);
                let mut values = vec![0.0; grid.len()];
                for (x, v) in pts {
                    let i = grid.locate(&x).filter(|&i| grid.is_active(i)).ok_or_else(|| {
                        Error::validation("initial.path", format!("point {:?} lies outside the domain", &x[..d]))
                    })?;
                    values[i] = v;
                }
                return GridField::from_values(grid, values);
            }
            InitialConfig::Bump { radius, mass } => {
                let grid = Arc::new(Grid::new(d, h, self.solver_config(*radius)?.domain_radius)?);
                bump_field(grid, *radius, *mass)?
            }
            InitialConfig::RescaledBump { mass, lambda } => {
                let r = 1.0 / lambda;
                let grid = Arc::new(Grid::new(d, h, self.solver_config(r)?.domain_radius)?);
                bump_field(grid, r, *mass)?
            }
            InitialConfig::Zkb { t0, c } => {
                let r = crate::analysis::zkb_radius(*t0, *c, d);
                let grid = Arc::new(Grid::new(d, h, self.solver_config(r)?.domain_radius)?);
                GridField::from_fn(grid, |x| zkb_solution(*t0, x, *c, d))
            }
        };
        Ok(field)
    }

    /// Sets a dot-separated key to a JSON value (or a bare string).
    pub fn apply_override(v: &mut Value, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("override `{assignment}` must have the form key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut cur = v;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, p) in parts.iter().enumerate() {
            let obj = cur
                .as_object_mut()
                .ok_or_else(|| Error::Parse(format!("override `{key}`: `{p}` is not inside an object")))?;
            if i + 1 == parts.len() {
                obj.insert(p.to_string(), value);
                return Ok(());
            }
            cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
        }
        Ok(())
    }
}

/// `(1 - |x|²/r²)₊²` sampled at cell centres and scaled to exact mass.
pub fn bump_field(grid: Arc<Grid>, radius: f64, mass: f64) -> Result<GridField> {
    GridField::from_fn(grid, |x| (1.0 - (norm(x) / radius).powi(2)).max(0.0).powi(2)).normalized_to(mass)
}

/// Reads `x[,y[,z]],u` rows; a header line is optional.
pub fn parse_field_csv(text: &str, dim: usize) -> Result<Vec<(Point, f64)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let nums: std::result::Result<Vec<f64>, _> = cols.iter().map(|c| c.parse::<f64>()).collect();
        let nums = match nums {
            Ok(n) => n,
            Err(_) if ln == 0 => continue,
            Err(e) => return Err(Error::Parse(format!("line {}: {e}", ln + 1))),
        };
        if nums.len() != dim + 1 {
            return Err(Error::Parse(format!("line {}: expected {} columns, found {}", ln + 1, dim + 1, nums.len())));
        }
        let mut x = [0.0; 3];
        x[..dim].copy_from_slice(&nums[..dim]);
        out.push((x, nums[dim]));
    }
    Ok(out)
}
