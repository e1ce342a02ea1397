//! The coupled system: lagged time marching, global Picard iteration over
//! trajectories, admissibility of initial data and the Lipschitz probe.

use std::cell::RefCell;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::analysis::{divergence_bound, support_constants, SupportInputs, SupportReport};
use crate::binding::{
    certificate, extend_w, point_mass_solution, solve_binding_picard, solve_binding_preconditioned, BindingContext,
    BindingField, Certificate, CertificateOptions, Preconditioner,
};
use crate::config::{AnchorKind, BindingConfig, Config};
use crate::geometry::norm;
use crate::kernels::AdhesionPotential;
use crate::measures::{kr_distance, Atom, DiscreteMeasure, GridField};
use crate::pm_solver::{
    face_velocity, march, uniform_schedule, MarchOptions, Record, SolverConfig, State, TimeGrid, WTrajectory,
    SUPPORT_THRESHOLD,
};
use crate::{Error, Result};

/// Reference pair `(μ0, w0)` of the certificate.
#[derive(Clone, Debug)]
pub struct Anchor {
    pub kind: AnchorKind,
    pub mu0: DiscreteMeasure,
    pub w0: BindingField,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub support_ok: bool,
    pub sup_ok: bool,
    pub mass_ok: bool,
    pub kr_ok: bool,
    pub support_radius: f64,
    pub support_limit: f64,
    pub sup: f64,
    pub sup_limit: f64,
    pub mass: f64,
    pub mass_target: f64,
    pub kr: f64,
    pub kr_limit: f64,
}

impl AdmissibilityReport {
    pub fn admissible(&self) -> bool {
        self.support_ok && self.sup_ok && self.mass_ok && self.kr_ok
    }

    pub fn failures(&self) -> Vec<&'static str> {
        [
            (self.support_ok, "support"),
            (self.sup_ok, "sup"),
            (self.mass_ok, "mass"),
            (self.kr_ok, "kr"),
        ]
        .into_iter()
        .filter(|(ok, _)| !ok)
        .map(|(_, n)| n)
        .collect()
    }
}

/// Checks `supp u0 ⊂ B̄_{ρ/4}`, `‖u0‖_∞ ≤ m_∞`, `‖u0‖_{L¹} = m` and
/// `‖u0 − μ0‖_KR ≤ r2/2`.
pub fn admissible_initial(
    u0: &GridField,
    mu0: &DiscreteMeasure,
    cert: &Certificate,
    rho: f64,
    m: f64,
    m_inf: f64,
) -> AdmissibilityReport {
    let support_radius = u0.support_radius(0.0);
    let mass = u0.mass();
    let sup = u0.max();
    let mass_ok = (mass - m).abs() <= 1e-12 * m;
    let kr = if mass_ok && (mu0.total_mass() - m).abs() <= 1e-12 * m {
        let nu = field_measure(u0);
        kr_distance(&nu, &mu0.scaled(nu.total_mass() / mu0.total_mass())).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    AdmissibilityReport {
        support_ok: support_radius <= 0.25 * rho * (1.0 + 1e-12),
        sup_ok: sup <= m_inf * (1.0 + 1e-12),
        mass_ok,
        kr_ok: kr <= 0.5 * cert.r2,
        support_radius,
        support_limit: 0.25 * rho,
        sup,
        sup_limit: m_inf,
        mass,
        mass_target: m,
        kr,
        kr_limit: 0.5 * cert.r2,
    }
}

fn field_measure(u: &GridField) -> DiscreteMeasure {
    let vol = u.grid.cell_volume();
    let atoms = u
        .values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(i, v)| Atom {
            pos: u.grid.center(i),
            weight: v * vol,
        })
        .collect();
    DiscreteMeasure {
        dim: u.dim(),
        atoms,
        domain_radius: u.grid.radius(),
        merge_tol: u.h() / 100.0,
    }
}

/// Atoms of `u` inside the closed ball; cells outside must lie below the
/// support threshold and are dropped.
pub fn binding_measure(u: &GridField, rho: f64, t: f64) -> Result<DiscreteMeasure> {
    let vol = u.grid.cell_volume();
    let mut atoms = Vec::new();
    for (i, &v) in u.values.iter().enumerate() {
        if v <= 0.0 {
            continue;
        }
        let x = u.grid.center(i);
        let r = norm(&x);
        if r <= rho * (1.0 + 1e-12) {
            atoms.push(Atom { pos: x, weight: v * vol });
        } else if v > SUPPORT_THRESHOLD {
            return Err(Error::CertificateBreach {
                t,
                monitor: "support",
                value: r,
                limit: rho,
            });
        }
    }
    Ok(DiscreteMeasure {
        dim: u.dim(),
        atoms,
        domain_radius: rho,
        merge_tol: u.h() / 100.0,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Horizon {
    pub user: f64,
    pub t_support: f64,
    pub certified: f64,
    pub used: f64,
}

/// Everything fixed before time stepping starts.
pub struct Setup {
    pub config: Config,
    pub binding: BindingConfig,
    pub solver: SolverConfig,
    pub u0: GridField,
    pub potential: AdhesionPotential,
    pub ctx: BindingContext,
    pub anchor: Anchor,
    pub certificate: Certificate,
    pub preconditioner: Preconditioner,
    pub support: SupportReport,
    pub admissibility: AdmissibilityReport,
    pub horizon: Horizon,
    pub mass: f64,
    pub m_inf: f64,
    pub u_bound: f64,
}

impl Setup {
    pub fn new(config: &Config, u0: GridField) -> Result<Self> {
        let binding = config
            .binding
            .clone()
            .filter(|b| b.enabled)
            .ok_or_else(|| Error::validation("binding", "coupled runs need an enabled binding section"))?;
        let nodes = config.nodes()?.expect("binding enabled");
        let kernel = config.kernel(binding.rho)?;
        let ctx = BindingContext::new(kernel.clone(), nodes.clone())?;
        let mass = u0.mass();
        let anchor = match binding.anchor {
            AnchorKind::Field => {
                let mu0 = binding_measure(&u0, binding.rho, 0.0)?;
                let p = ctx.problem(&mu0, 0.0)?;
                let opts = crate::binding::PicardOptions {
                    tol: 1e-12,
                    max_iter: binding.max_iter.max(2000),
                    relaxation: binding.relaxation,
                };
                let w0 = solve_binding_picard(&p, &BindingField::constant(nodes.clone(), 0.5), &opts)?.field;
                Anchor {
                    kind: AnchorKind::Field,
                    mu0,
                    w0,
                }
            }
            AnchorKind::PointMass => {
                let pm = point_mass_solution(&kernel, mass, 0.0)?;
                Anchor {
                    kind: AnchorKind::PointMass,
                    mu0: pm.measure(config.dimension),
                    w0: pm.profile(&nodes)?,
                }
            }
        };
        Self::with_anchor(config, u0, ctx, anchor, None)
    }

    /// Builds a setup around an existing anchor and, optionally, its certificate.
    pub fn with_anchor(
        config: &Config,
        u0: GridField,
        ctx: BindingContext,
        anchor: Anchor,
        cert: Option<(Certificate, Preconditioner)>,
    ) -> Result<Self> {
        let binding = config.binding.clone().filter(|b| b.enabled).expect("binding enabled");
        let solver = config.solver_config(u0.support_radius(0.0))?;
        let potential = config.potential()?;
        let (certificate, preconditioner) = match cert {
            Some(c) => c,
            None => certificate(
                &ctx,
                &anchor.mu0,
                &anchor.w0,
                0.0,
                &CertificateOptions {
                    samples: binding.certificate_samples,
                    seed: config.run.seed,
                    ..Default::default()
                },
            )?,
        };
        let mass = anchor.mu0.total_mass();
        let m_inf = u0.max();
        let rho = binding.rho;
        let admissibility = admissible_initial(&u0, &anchor.mu0, &certificate, rho, mass, m_inf);
        if !admissibility.admissible() {
            if config.run.allow_inadmissible {
                warn!("initial datum fails admissibility checks {:?}; continuing", admissibility.failures());
            } else {
                return Err(Error::Admissibility(format!(
                    "initial datum fails checks {:?}",
                    admissibility.failures()
                )));
            }
        }
        let u_bound = 2.0 * m_inf;
        let chi = solver.chi;
        let f_sup = potential.grad_sup();
        let w_norm = 2.0 * (anchor.w0.w_norm() + certificate.r1);
        let div = divergence_bound(w_norm, f_sup, mass, potential.lap_tv_bound(), u_bound);
        let support = support_constants(&SupportInputs {
            dim: config.dimension,
            chi_sup: chi.sup_abs(u_bound),
            chi_deriv_sup: chi.deriv_sup(),
            div_v_neg: div,
            v_sup: f_sup * mass,
            m_inf,
            rho,
            u0_support: u0.support_radius(0.0).min(admissibility.support_radius),
        })?;
        let user = config.run.t_end;
        let certified = user.min(support.t_support);
        let used = if config.run.ignore_horizon { user } else { certified };
        if used < user {
            info!("horizon limited to {used:.4e} by support control (requested {user})");
        }
        Ok(Setup {
            config: config.clone(),
            binding,
            solver,
            u0,
            potential,
            ctx,
            anchor,
            certificate,
            preconditioner,
            support,
            admissibility,
            horizon: Horizon {
                user,
                t_support: support.t_support,
                certified,
                used,
            },
            mass,
            m_inf,
            u_bound,
        })
    }

    /// Setup for another initial datum sharing this anchor and certificate.
    pub fn sibling(&self, u0: GridField) -> Result<Setup> {
        let ctx = BindingContext::new(self.ctx.kernel.clone(), self.ctx.nodes.clone())?;
        Setup::with_anchor(
            &self.config,
            u0,
            ctx,
            self.anchor.clone(),
            Some((self.certificate.clone(), self.preconditioner.clone())),
        )
    }

    /// A-priori stable step for every state the monitors allow.
    pub fn fixed_dt(&self) -> f64 {
        let s = &self.solver;
        let d = self.config.dimension as f64;
        let ub = self.u_bound;
        let diff = h2(s.h) / (2.0 * d * (s.epsilon + 4.0 * ub));
        let speed = self.potential.grad_sup() * self.mass * (s.chi.sup_abs(ub) + ub * s.chi.deriv_sup());
        let adv = if speed > 0.0 { s.h / (2.0 * d * speed) } else { f64::INFINITY };
        s.cfl_safety * diff.min(adv)
    }

    pub fn fixed_schedule(&self) -> Vec<f64> {
        uniform_schedule(self.horizon.used, self.fixed_dt())
    }
}

fn h2(h: f64) -> f64 {
    h * h
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MonitorSummary {
    pub w_min: f64,
    pub w_max: f64,
    pub w_distance_max: f64,
    pub w_distance_limit: f64,
    pub kr_max: f64,
    pub kr_limit: f64,
    pub support_max: f64,
    pub support_limit: f64,
    pub u_max: f64,
    pub u_limit: f64,
    pub mass_drift_max: f64,
    pub binding_solves: usize,
    pub binding_fallbacks: usize,
    pub binding_iterations: usize,
    pub binding_contraction_max: f64,
}

struct Monitors<'a> {
    setup: &'a Setup,
    summary: MonitorSummary,
}

impl<'a> Monitors<'a> {
    fn new(setup: &'a Setup) -> Self {
        Monitors {
            setup,
            summary: MonitorSummary {
                w_min: f64::INFINITY,
                w_max: f64::NEG_INFINITY,
                w_distance_limit: setup.certificate.r1,
                kr_limit: setup.certificate.r2,
                support_limit: setup.binding.rho,
                u_limit: setup.u_bound,
                ..Default::default()
            },
        }
    }

    fn breach(t: f64, monitor: &'static str, value: f64, limit: f64) -> Error {
        Error::CertificateBreach { t, monitor, value, limit }
    }

    fn check_state(&mut self, state: &State) -> Result<()> {
        let s = &mut self.summary;
        let t = state.t;
        let d = &state.diagnostics;
        s.u_max = s.u_max.max(d.max);
        s.support_max = s.support_max.max(d.support_radius);
        s.mass_drift_max = s.mass_drift_max.max(state.mass_drift());
        if d.max > s.u_limit {
            return Err(Self::breach(t, "u_max", d.max, s.u_limit));
        }
        if d.support_radius > s.support_limit {
            return Err(Self::breach(t, "support", d.support_radius, s.support_limit));
        }
        Ok(())
    }

    /// Solves the binding equation for `u` at time `t`, warm-started at `warm`.
    fn solve(&mut self, u: &GridField, t: f64, warm: &BindingField) -> Result<BindingField> {
        let setup = self.setup;
        let rho = setup.binding.rho;
        let mu = binding_measure(u, rho, t)?;
        let mu0 = &setup.anchor.mu0;
        let mu = mu.scaled(mu0.total_mass() / mu.total_mass());
        let kr = kr_distance(&mu, mu0)?;
        self.summary.kr_max = self.summary.kr_max.max(kr);
        if kr > setup.certificate.r2 {
            return Err(Self::breach(t, "kr", kr, setup.certificate.r2));
        }
        let problem = setup.ctx.problem(&mu, t)?;
        let b = &setup.binding;
        let out = match solve_binding_preconditioned(&problem, warm, &setup.preconditioner, b.tol, b.max_iter) {
            Ok(o) => o,
            Err(Error::NonConvergence { residual, .. }) => {
                debug!("preconditioned solve stalled at t = {t} (residual {residual:.3e}); relaxed Picard fallback");
                self.summary.binding_fallbacks += 1;
                solve_binding_picard(&problem, warm, &b.picard())?
            }
            Err(e) => return Err(e),
        };
        let s = &mut self.summary;
        s.binding_solves += 1;
        s.binding_iterations += out.iterations;
        s.binding_contraction_max = s.binding_contraction_max.max(out.contraction);
        let w = out.field;
        let (lo, hi) = (w.min(), w.max());
        s.w_min = s.w_min.min(lo);
        s.w_max = s.w_max.max(hi);
        if !(lo > 0.0) {
            return Err(Self::breach(t, "w_min", lo, 0.0));
        }
        if !(hi < 1.0) {
            return Err(Self::breach(t, "w_max", hi, 1.0));
        }
        let dist = w.distance(&setup.anchor.w0);
        s.w_distance_max = s.w_distance_max.max(dist);
        if dist > setup.certificate.r1 {
            return Err(Self::breach(t, "w_distance", dist, setup.certificate.r1));
        }
        Ok(w)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PicardReport {
    pub iterations: usize,
    pub sweeps: usize,
    pub differences: Vec<f64>,
    pub factors: Vec<f64>,
    pub outer_factor: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub horizon: Horizon,
    pub certificate: Certificate,
    pub admissibility: AdmissibilityReport,
    pub support: SupportReport,
    pub monitors: MonitorSummary,
    pub steps: usize,
    pub final_t: f64,
    pub picard: Option<PicardReport>,
}

/// States with the binding field solved at the same times.
pub struct CoupledRun {
    pub states: Vec<State>,
    pub w: Vec<BindingField>,
    pub report: RunReport,
}

impl CoupledRun {
    pub fn last(&self) -> &State {
        self.states.last().expect("run keeps the initial state")
    }
}

fn report(setup: &Setup, mode: &str, monitors: MonitorSummary, steps: usize, final_t: f64) -> RunReport {
    RunReport {
        mode: mode.to_string(),
        horizon: setup.horizon,
        certificate: setup.certificate.clone(),
        admissibility: setup.admissibility.clone(),
        support: setup.support,
        monitors,
        steps,
        final_t,
        picard: None,
    }
}

/// Lagged coupling: `w^n` from `u^n`, then one PDE step with `w^n` frozen.
pub fn run_time_marching(setup: &Setup) -> Result<CoupledRun> {
    let cap = setup.config.run.output_interval.unwrap_or(setup.horizon.used).max(f64::MIN_POSITIVE);
    let record = match setup.config.run.output_interval {
        Some(dt) => Record::Interval(dt),
        None => Record::Endpoints,
    };
    let opts = MarchOptions::adaptive(setup.horizon.used, cap).with_record(record);
    run_time_marching_with(setup, &opts)
}

pub fn run_time_marching_with(setup: &Setup, opts: &MarchOptions) -> Result<CoupledRun> {
    let grid = setup.u0.grid.clone();
    let monitors = RefCell::new(Monitors::new(setup));
    let mut w_cur = setup.anchor.w0.clone();
    let mut w_hist: Vec<(f64, BindingField)> = Vec::new();
    let every = setup.binding.resolve_every;
    let traj = march(
        setup.u0.clone(),
        0.0,
        &setup.solver,
        opts,
        |n, t, u| {
            let mut m = monitors.borrow_mut();
            if n == 0 {
                m.check_state(&State::new(u.clone(), t))?;
            }
            if n % every == 0 {
                w_cur = m.solve(u, t, &w_cur)?;
            }
            w_hist.push((t, w_cur.clone()));
            Ok(face_velocity(&setup.potential, &extend_w(&w_cur, &grid), u))
        },
        |state, _| monitors.borrow_mut().check_state(state),
    )?;
    let mut m = monitors.into_inner();
    let last = traj.last();
    let w_final = m.solve(&last.u, last.t, &w_cur)?;
    w_hist.push((last.t, w_final));
    let steps = last.diagnostics.steps;
    let final_t = last.t;
    let w = traj
        .states
        .iter()
        .map(|s| {
            let k = w_hist.partition_point(|(t, _)| *t < s.t);
            w_hist[k.min(w_hist.len() - 1)].1.clone()
        })
        .collect();
    let summary = m.summary;
    Ok(CoupledRun {
        states: traj.states,
        w,
        report: report(setup, "time_marching", summary, steps, final_t),
    })
}

/// Outer fixed point over trajectories on the fixed step grid: binding fields
/// from the current trajectory, then a full PDE solve with those fields frozen.
pub fn run_global_picard(setup: &Setup, tol: f64, max_outer: usize) -> Result<CoupledRun> {
    let times = setup.fixed_schedule();
    let grid = setup.u0.grid.clone();
    let mut monitors = Monitors::new(setup);
    let mut u_traj: Vec<GridField> = vec![setup.u0.clone(); times.len()];
    let mut w_traj: Vec<BindingField> = vec![setup.anchor.w0.clone(); times.len()];
    let mut differences = Vec::new();
    let abs_tol = tol * setup.mass;
    for sweep in 1..=max_outer + 1 {
        for (n, &t) in times.iter().enumerate() {
            let warm = w_traj[n].clone();
            w_traj[n] = monitors.solve(&u_traj[n], t, &warm)?;
        }
        let wt = WTrajectory {
            times: times.clone(),
            fields: w_traj.iter().map(|w| extend_w(w, &grid)).collect(),
        };
        let opts = MarchOptions {
            t_end: *times.last().unwrap(),
            time_grid: TimeGrid::Schedule(times.clone()),
            record: Record::All,
            d1_slack: 0.05,
        };
        let traj = march(
            setup.u0.clone(),
            0.0,
            &setup.solver,
            &opts,
            |n, _, u| Ok(face_velocity(&setup.potential, &wt.fields[n], u)),
            |state, _| monitors.check_state(state),
        )?;
        let diff = traj
            .states
            .iter()
            .zip(&u_traj)
            .map(|(s, u)| s.u.l1_distance(u))
            .fold(0.0, f64::max);
        differences.push(diff);
        u_traj = traj.states.iter().map(|s| s.u.clone()).collect();
        debug!("global picard sweep {sweep}: sup_t L1 change {diff:.3e}");
        if diff <= abs_tol {
            for (n, &t) in times.iter().enumerate() {
                let warm = w_traj[n].clone();
                w_traj[n] = monitors.solve(&u_traj[n], t, &warm)?;
            }
            let floor = 1e-14 * setup.mass;
            let factors: Vec<f64> = differences
                .windows(2)
                .filter(|w| w[0] > floor)
                .map(|w| w[1] / w[0])
                .collect();
            let outer_factor = factors.iter().cloned().fold(0.0, f64::max);
            let steps = times.len() - 1;
            let final_t = *times.last().unwrap();
            let mut rep = report(setup, "global_picard", monitors.summary, steps, final_t);
            rep.picard = Some(PicardReport {
                iterations: sweep - 1,
                sweeps: sweep,
                differences,
                factors,
                outer_factor,
                dt: setup.fixed_dt(),
            });
            return Ok(CoupledRun {
                states: traj.states,
                w: w_traj,
                report: rep,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_outer,
        residual: *differences.last().unwrap_or(&f64::NAN),
        history: differences,
        last: Vec::new(),
    })
}

/// `u0 (1 + ε sin(2π x₁ / s))`, rescaled to the mass of `u0`.
pub fn sine_perturbation(u0: &GridField, eps: f64, wavelength: f64) -> Result<GridField> {
    let grid = u0.grid.clone();
    let values = u0
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| v * (1.0 + eps * (2.0 * std::f64::consts::PI * grid.center(i)[0] / wavelength).sin()))
        .collect();
    GridField::from_values(grid, values)?.normalized_to(u0.mass())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub exact_match: bool,
    pub ratio: Option<f64>,
    pub input_l1: f64,
    pub u_gap: f64,
    pub w_gap: f64,
}

/// Runs both data on the same step grid around the anchor of `setup_a`.
pub fn lipschitz_probe(setup_a: &Setup, u0_b: &GridField) -> Result<LipschitzReport> {
    let setup_b = setup_a.sibling(u0_b.clone())?;
    let times = setup_a.fixed_schedule();
    let opts = MarchOptions::schedule(times);
    let (ra, rb) = rayon::join(
        || run_time_marching_with(setup_a, &opts),
        || run_time_marching_with(&setup_b, &opts),
    );
    let (ra, rb) = (ra?, rb?);
    let u_gap = ra
        .states
        .iter()
        .zip(&rb.states)
        .map(|(a, b)| a.u.l1_distance(&b.u))
        .fold(0.0, f64::max);
    let w_gap = ra.w.iter().zip(&rb.w).map(|(a, b)| a.distance(b)).fold(0.0, f64::max);
    let input_l1 = setup_a.u0.l1_distance(u0_b);
    let numer = u_gap + w_gap;
    let exact_match = input_l1 == 0.0 && numer == 0.0;
    Ok(LipschitzReport {
        exact_match,
        ratio: (input_l1 > 0.0).then(|| numer / input_l1),
        input_l1,
        u_gap,
        w_gap,
    })
}

/// Smallest admissible rescaling `λ ≥ ρ0 max(4/ρ, 2m/r2)` of a bump of radius `ρ0`.
pub fn rescaling_threshold(rho0: f64, rho: f64, mass: f64, r2: f64) -> f64 {
    rho0 * (4.0 / rho).max(2.0 * mass / r2)
}

/// Pure porous-medium run, used when no binding section is enabled.
pub fn run_uncoupled(config: &Config, u0: &GridField) -> Result<crate::pm_solver::Trajectory> {
    let solver = config.solver_config(u0.support_radius(0.0))?;
    let t_end = config.run.t_end;
    let cap = config.run.output_interval.unwrap_or(t_end).max(f64::MIN_POSITIVE);
    let mut opts = MarchOptions::adaptive(t_end, cap);
    if let Some(dt) = config.run.output_interval {
        opts.record = Record::Interval(dt);
    }
    let zero = crate::pm_solver::FaceField::zeros(&u0.grid);
    march(u0.clone(), 0.0, &solver, &opts, |_, _, _| Ok(zero.clone()), |_, _| Ok(()))
}
