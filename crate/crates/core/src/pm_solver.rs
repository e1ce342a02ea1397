//! Explicit conservative finite-volume solver for
//! `∂_t u = εΔu + Δu² − ∇·(V u χ(u))` on a truncated ball with zero
//! boundary data.

use log::{debug, trace};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{norm, Point, ORIGIN};
use crate::kernels::{adhesion_velocity, support_masses, velocity_at, AdhesionPotential, VectorField};
use crate::measures::{GridField, Grid};
use crate::{Error, Result};

/// Sensitivity function with `χ(0) = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Chi {
    Zero,
    /// `c u / (1 + u)`
    Saturating { c: f64 },
    /// `c u`
    Linear { c: f64 },
    /// `c (1 - e^{-u})`
    Exponential { c: f64 },
}

impl Chi {
    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            Chi::Zero => 0.0,
            Chi::Saturating { c } => c * u / (1.0 + u),
            Chi::Linear { c } => c * u,
            Chi::Exponential { c } => c * (1.0 - (-u).exp()),
        }
    }

    pub fn deriv(&self, u: f64) -> f64 {
        match *self {
            Chi::Zero => 0.0,
            Chi::Saturating { c } => c / ((1.0 + u) * (1.0 + u)),
            Chi::Linear { c } => c,
            Chi::Exponential { c } => c * (-u).exp(),
        }
    }

    /// `sup |χ|` over `[0, u_max]`.
    pub fn sup_abs(&self, u_max: f64) -> f64 {
        self.eval(u_max.max(0.0)).abs()
    }

    /// `sup |χ'|` over `[0, ∞)`.
    pub fn deriv_sup(&self) -> f64 {
        self.deriv(0.0).abs()
    }

    /// Sign of `(uχ(u))'`, used for upwinding.
    pub fn direction(&self) -> f64 {
        match *self {
            Chi::Zero => 0.0,
            Chi::Saturating { c } | Chi::Linear { c } | Chi::Exponential { c } => c.signum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Chi::Zero => Ok(()),
            Chi::Saturating { c } | Chi::Linear { c } | Chi::Exponential { c } => {
                if c.is_finite() {
                    Ok(())
                } else {
                    Err(Error::validation("solver.chi.c", "must be finite"))
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub epsilon: f64,
    pub h: f64,
    pub domain_radius: f64,
    #[serde(default = "default_safety")]
    pub cfl_safety: f64,
    pub chi: Chi,
    #[serde(default)]
    pub mollifier_eps: f64,
}

fn default_safety() -> f64 {
    0.45
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::validation("solver.epsilon", "must be finite and nonnegative"));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::validation("solver.h", "must be positive"));
        }
        if !(self.domain_radius > self.h) {
            return Err(Error::validation("solver.domain_radius", "must exceed the grid spacing"));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety < 1.0) {
            return Err(Error::validation("solver.cfl_safety", "must lie in (0, 1)"));
        }
        if !(self.mollifier_eps >= 0.0) {
            return Err(Error::validation("solver.mollifier_eps", "must be nonnegative"));
        }
        self.chi.validate()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub mass0: f64,
    pub mass: f64,
    pub max: f64,
    pub support_radius: f64,
    pub dt: f64,
    pub steps: usize,
    pub clipped: f64,
    pub d1_bound: f64,
    #[serde(skip)]
    pub dt_history: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct State {
    pub t: f64,
    pub u: GridField,
    pub diagnostics: Diagnostics,
}

pub const SUPPORT_THRESHOLD: f64 = 1e-12;

impl State {
    pub fn new(u: GridField, t: f64) -> Self {
        let mass = u.mass();
        let max = u.max();
        let diagnostics = Diagnostics {
            mass0: mass,
            mass,
            max,
            support_radius: u.support_radius(SUPPORT_THRESHOLD),
            d1_bound: max,
            ..Default::default()
        };
        State { t, u, diagnostics }
    }

    pub fn mass_drift(&self) -> f64 {
        let d = &self.diagnostics;
        if d.mass0 == 0.0 {
            0.0
        } else {
            (d.mass - d.mass0).abs() / d.mass0
        }
    }
}

/// Normal velocity on the face between cell `i` and its forward neighbour
/// along axis `k`, stored at `i * dim + k`.
#[derive(Clone, Debug)]
pub struct FaceField {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FaceField {
    pub fn zeros(grid: &Grid) -> Self {
        FaceField {
            dim: grid.dim(),
            values: vec![0.0; grid.len() * grid.dim()],
        }
    }

    /// Face averages of a cell-centred vector field.
    pub fn from_cells(grid: &Grid, v: &VectorField) -> Self {
        let d = grid.dim();
        let values = (0..grid.len() * d)
            .into_par_iter()
            .map(|f| {
                let (i, k) = (f / d, f % d);
                match grid.neighbor(i, k, true) {
                    Some(j) => 0.5 * (v[i][k] + v[j][k]),
                    None => v[i][k],
                }
            })
            .collect();
        FaceField { dim: d, values }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Discrete divergence at every cell.
    pub fn divergence(&self, grid: &Grid) -> Vec<f64> {
        let d = self.dim;
        let h = grid.h();
        (0..grid.len())
            .map(|i| {
                (0..d)
                    .map(|k| {
                        let back = grid.neighbor(i, k, false).map_or(0.0, |j| self.values[j * d + k]);
                        (self.values[i * d + k] - back) / h
                    })
                    .sum()
            })
            .collect()
    }

    pub fn max_divergence(&self, grid: &Grid) -> f64 {
        self.divergence(grid).iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

fn face_point(grid: &Grid, i: usize, k: usize) -> Point {
    let mut x = grid.center(i);
    x[k] += 0.5 * grid.h();
    x
}

/// `V = w̃ (∇H⋆u)` at faces; `w_ext` holds the extended binding field per cell.
/// Faces with no support on either side carry no flux and are left at zero.
pub fn face_velocity(pot: &AdhesionPotential, w_ext: &[f64], u: &GridField) -> FaceField {
    let grid = &u.grid;
    let d = grid.dim();
    let support = support_masses(u);
    if support.is_empty() {
        return FaceField::zeros(grid);
    }
    let val = |j: usize| if grid.is_active(j) { u.values[j] } else { 0.0 };
    let values = (0..grid.len() * d)
        .into_par_iter()
        .map(|f| {
            let (i, k) = (f / d, f % d);
            let j = grid.neighbor(i, k, true);
            let touches = val(i) > 0.0 || j.is_some_and(|j| val(j) > 0.0);
            if !touches {
                return 0.0;
            }
            let wf = match j {
                Some(j) => 0.5 * (w_ext[i] + w_ext[j]),
                None => w_ext[i],
            };
            wf * velocity_at(pot, &support, &face_point(grid, i, k))[k]
        })
        .collect();
    FaceField { dim: d, values }
}

/// Cell-centred `V = w̃ (∇H⋆u)`.
pub fn assemble_velocity(pot: &AdhesionPotential, w_ext: &[f64], u: &GridField) -> VectorField {
    adhesion_velocity(pot, u)
        .into_iter()
        .zip(w_ext)
        .map(|(v, w)| [v[0] * w, v[1] * w, v[2] * w])
        .collect()
}

fn stability_dt(u: &GridField, faces: &FaceField, cfg: &SolverConfig) -> f64 {
    let h = cfg.h;
    let d = u.dim() as f64;
    let umax = u.max();
    let diff = cfg.epsilon + 4.0 * umax;
    let dt_diff = if diff > 0.0 { h * h / (2.0 * d * diff) } else { f64::INFINITY };
    let speed = faces.max_abs() * (cfg.chi.sup_abs(umax) + umax * cfg.chi.deriv_sup());
    let dt_adv = if speed > 0.0 { h / (2.0 * d * speed) } else { f64::INFINITY };
    dt_diff.min(dt_adv)
}

/// Stable explicit step, capped at `cap` when the state gives no bound.
pub fn cfl_dt(state: &State, faces: &FaceField, cfg: &SolverConfig, cap: Option<f64>) -> Result<f64> {
    let dt = cfg.cfl_safety * stability_dt(&state.u, faces, cfg);
    match (dt.is_finite(), cap) {
        (true, Some(c)) => Ok(dt.min(c)),
        (true, None) => Ok(dt),
        (false, Some(c)) => Ok(c),
        (false, None) => Err(Error::DegenerateState),
    }
}

const CLIP_TOL: f64 = 1e-12;

/// One forward-Euler step of the conservative scheme.
pub fn step(state: &State, faces: &FaceField, dt: f64, cfg: &SolverConfig) -> Result<State> {
    let u = &state.u;
    let grid = &u.grid;
    let d = grid.dim();
    let h = cfg.h;
    let limit = stability_dt(u, faces, cfg);
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(Error::CflViolation { dt, limit });
    }
    let val = |j: usize| if grid.is_active(j) { u.values[j] } else { 0.0 };
    let eps = cfg.epsilon;
    let chi = cfg.chi;
    let dir = chi.direction();
    let g = |x: f64| x * chi.eval(x);
    let flux_of = |l: f64, r: f64, v: f64| {
        let diff = -(eps + l + r) * (r - l) / h;
        let up = if v * dir >= 0.0 { l } else { r };
        diff + v * g(up)
    };
    let flux: Vec<f64> = (0..grid.len() * d)
        .into_par_iter()
        .map(|f| {
            let (i, k) = (f / d, f % d);
            let l = val(i);
            let r = grid.neighbor(i, k, true).map_or(0.0, val);
            if l == 0.0 && r == 0.0 {
                0.0
            } else {
                flux_of(l, r, faces.values[f])
            }
        })
        .collect();
    let mut values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            if !grid.is_active(i) {
                return 0.0;
            }
            let ui = u.values[i];
            let mut div = 0.0;
            for k in 0..d {
                let back = match grid.neighbor(i, k, false) {
                    Some(j) => flux[j * d + k],
                    None => flux_of(0.0, ui, 0.0),
                };
                div += flux[i * d + k] - back;
            }
            ui - dt / h * div
        })
        .collect();
    let vol = grid.cell_volume();
    let total = state.diagnostics.mass.max(f64::MIN_POSITIVE);
    let mut clipped = 0.0;
    for v in values.iter_mut() {
        if *v < 0.0 {
            clipped += -*v * vol;
            *v = 0.0;
        }
    }
    let t = state.t + dt;
    if clipped > CLIP_TOL * total {
        return Err(Error::NegativityBreach { t, clipped, total });
    }
    if clipped > 0.0 {
        trace!("clipped {clipped:.3e} of mass at t = {t}");
    }
    let u = GridField {
        grid: grid.clone(),
        values,
    };
    let mut diagnostics = state.diagnostics.clone();
    diagnostics.mass = u.mass();
    diagnostics.max = u.max();
    diagnostics.support_radius = u.support_radius(SUPPORT_THRESHOLD);
    diagnostics.dt = dt;
    diagnostics.steps += 1;
    diagnostics.clipped += clipped;
    diagnostics.dt_history.push(dt);
    Ok(State { t, u, diagnostics })
}

/// How the time grid is chosen.
#[derive(Clone, Debug)]
pub enum TimeGrid {
    /// CFL-limited steps, capped at `cap`.
    Adaptive { cap: f64 },
    /// Prescribed increasing times starting at the initial time.
    Schedule(Vec<f64>),
}

/// Which states a march keeps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Record {
    Endpoints,
    All,
    /// States at multiples of the interval; adaptive steps are shortened to hit them.
    Interval(f64),
}

#[derive(Clone, Debug)]
pub struct MarchOptions {
    pub t_end: f64,
    pub time_grid: TimeGrid,
    pub record: Record,
    /// Relative slack of the max-bound monitor.
    pub d1_slack: f64,
}

impl MarchOptions {
    pub fn adaptive(t_end: f64, cap: f64) -> Self {
        MarchOptions {
            t_end,
            time_grid: TimeGrid::Adaptive { cap },
            record: Record::Endpoints,
            d1_slack: 0.05,
        }
    }

    pub fn schedule(times: Vec<f64>) -> Self {
        MarchOptions {
            t_end: *times.last().unwrap_or(&0.0),
            time_grid: TimeGrid::Schedule(times),
            record: Record::All,
            d1_slack: 0.05,
        }
    }

    pub fn with_record(mut self, record: Record) -> Self {
        self.record = record;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<State>,
}

impl Trajectory {
    pub fn last(&self) -> &State {
        self.states.last().expect("trajectory holds the initial state")
    }

    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }
}

/// Uniform schedule from `0` to `t_end` with steps no longer than `dt`.
pub fn uniform_schedule(t_end: f64, dt: f64) -> Vec<f64> {
    let n = (t_end / dt - 1e-9).ceil().max(0.0) as usize;
    if n == 0 {
        return vec![0.0];
    }
    (0..=n).map(|k| t_end * k as f64 / n as f64).collect()
}

/// Time marching with a caller-supplied velocity and per-step monitor.
pub fn march<V, M>(u0: GridField, t0: f64, cfg: &SolverConfig, opts: &MarchOptions, mut velocity: V, mut monitor: M) -> Result<Trajectory>
where
    V: FnMut(usize, f64, &GridField) -> Result<FaceField>,
    M: FnMut(&State, &FaceField) -> Result<()>,
{
    cfg.validate()?;
    let mut state = State::new(u0, t0);
    let mut states = vec![state.clone()];
    let mut n = 0usize;
    let tiny = 1e-12 * opts.t_end.abs().max(1.0);
    let mut next_out = match opts.record {
        Record::Interval(dt) => t0 + dt,
        _ => f64::INFINITY,
    };
    loop {
        let remaining = opts.t_end - state.t;
        let scheduled = match &opts.time_grid {
            TimeGrid::Schedule(ts) => {
                if n + 1 >= ts.len() {
                    break;
                }
                Some(ts[n + 1] - ts[n])
            }
            TimeGrid::Adaptive { .. } => {
                if remaining <= tiny {
                    break;
                }
                None
            }
        };
        let faces = velocity(n, state.t, &state.u)?;
        let dt = match (&opts.time_grid, scheduled) {
            (_, Some(dt)) => dt,
            (TimeGrid::Adaptive { cap }, None) => {
                let to_out = if next_out - state.t > tiny { next_out - state.t } else { f64::INFINITY };
                cfl_dt(&state, &faces, cfg, Some(cap.min(remaining).min(to_out)))?
            }
            _ => unreachable!(),
        };
        let growth = (dt * cfg.chi.sup_abs(state.u.max()) * faces.max_divergence(&state.u.grid)).exp();
        let bound = state.diagnostics.d1_bound * growth;
        let mut next = step(&state, &faces, dt, cfg)?;
        if let TimeGrid::Schedule(ts) = &opts.time_grid {
            next.t = ts[n + 1];
        } else if (next.t - opts.t_end).abs() <= tiny {
            next.t = opts.t_end;
        }
        next.diagnostics.d1_bound = bound;
        if next.diagnostics.max > bound * (1.0 + opts.d1_slack) {
            return Err(Error::BoundBreach {
                t: next.t,
                value: next.diagnostics.max,
                bound,
            });
        }
        monitor(&next, &faces)?;
        n += 1;
        let keep = match opts.record {
            Record::All => true,
            Record::Endpoints => false,
            Record::Interval(dt) => {
                if next.t >= next_out - tiny {
                    while next_out <= next.t + tiny {
                        next_out += dt;
                    }
                    true
                } else {
                    false
                }
            }
        };
        if keep {
            states.push(next.clone());
        }
        state = next;
    }
    debug!(
        "march: {} steps to t = {:.6}, mass drift {:.3e}",
        n,
        state.t,
        state.mass_drift()
    );
    if n > 0 && states.last().map(|s| s.t) != Some(state.t) {
        states.push(state);
    }
    Ok(Trajectory { states })
}

/// Extended binding fields given at increasing times, held piecewise constant.
#[derive(Clone, Debug)]
pub struct WTrajectory {
    pub times: Vec<f64>,
    pub fields: Vec<Vec<f64>>,
}

impl WTrajectory {
    pub fn constant(w: Vec<f64>) -> Self {
        WTrajectory {
            times: vec![f64::NEG_INFINITY],
            fields: vec![w],
        }
    }

    pub fn at(&self, t: f64) -> &[f64] {
        let k = self.times.partition_point(|&s| s <= t * (1.0 + 1e-14) + 1e-300);
        &self.fields[k.saturating_sub(1)]
    }
}

pub fn solve_fixed_w(
    u0: &GridField,
    w_traj: &WTrajectory,
    pot: &AdhesionPotential,
    cfg: &SolverConfig,
    opts: &MarchOptions,
) -> Result<Trajectory> {
    if w_traj.fields.iter().flatten().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::validation("w", "binding values must lie in [0, 1]"));
    }
    march(u0.clone(), 0.0, cfg, opts, |_, t, u| Ok(face_velocity(pot, w_traj.at(t), u)), |_, _| Ok(()))
}

pub fn solve_fixed_velocity(u0: &GridField, faces: &FaceField, cfg: &SolverConfig, opts: &MarchOptions) -> Result<Trajectory> {
    march(u0.clone(), 0.0, cfg, opts, |_, _, _| Ok(faces.clone()), |_, _| Ok(()))
}

/// Normalised bump `ζ(s) ∝ exp(1/(s²-1))`, unnormalised.
fn bump(s: f64) -> f64 {
    if s.abs() < 1.0 {
        (1.0 / (s * s - 1.0)).exp()
    } else {
        0.0
    }
}

/// Convolution of a cell field with the bump of radius `eps`.
pub fn mollify_field(u: &GridField, eps: f64) -> GridField {
    let grid = &u.grid;
    let h = grid.h();
    let reach = (eps / h).floor() as i64;
    if eps <= 0.0 || reach == 0 {
        return u.clone();
    }
    let d = grid.dim();
    let span = |k: usize| if k < d { reach } else { 0 };
    let mut stencil = Vec::new();
    for a in -span(0)..=span(0) {
        for b in -span(1)..=span(1) {
            for c in -span(2)..=span(2) {
                let r = norm(&[a as f64 * h, b as f64 * h, c as f64 * h]) / eps;
                let wgt = bump(r);
                if wgt > 0.0 {
                    stencil.push(([a, b, c], wgt));
                }
            }
        }
    }
    let total: f64 = stencil.iter().map(|s| s.1).sum();
    let mut out = vec![0.0; grid.len()];
    for (j, &uj) in u.values.iter().enumerate() {
        if uj == 0.0 {
            continue;
        }
        let m = grid.multi(j);
        for (o, wgt) in &stencil {
            if let Some(t) = grid.index(&[m[0] + o[0], m[1] + o[1], m[2] + o[2]]) {
                if grid.is_active(t) {
                    out[t] += uj * wgt / total;
                }
            }
        }
    }
    GridField {
        grid: grid.clone(),
        values: out,
    }
}

/// Convolution of a scalar function with the one-dimensional bump of radius `eps`.
pub fn mollify_scalar<F>(f: F, eps: f64) -> impl Fn(f64) -> f64
where
    F: Fn(f64) -> f64,
{
    const N: usize = 400;
    let nodes: Vec<(f64, f64)> = (0..N)
        .map(|i| {
            let s = -1.0 + (i as f64 + 0.5) * 2.0 / N as f64;
            (s, bump(s))
        })
        .collect();
    let total: f64 = nodes.iter().map(|n| n.1).sum();
    move |x| {
        if eps <= 0.0 {
            return f(x);
        }
        nodes.iter().map(|(s, k)| f(x - eps * s) * k).sum::<f64>() / total
    }
}

pub fn zero_velocity(grid: &Grid) -> VectorField {
    vec![ORIGIN; grid.len()]
}
