use std::fs;
use std::path::Path;

use adhesim_core::analysis::{zkb_mass, zkb_radius, zkb_solution};
use adhesim_core::binding::{point_mass_solution, solve_binding_picard, BindingContext, BindingField};
use adhesim_core::config::{Config, InitialConfig, Mode};
use adhesim_core::coupled::{binding_measure, run_global_picard, run_time_marching, run_uncoupled, CoupledRun, Setup};
use adhesim_core::measures::{kr_distance, DiscreteMeasure, GridField};
use adhesim_core::pm_solver::{solve_fixed_velocity, FaceField, MarchOptions, State};
use adhesim_core::Error;
use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use log::info;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::output::{field_csv, nodes_csv, num, table, OutDir};
use crate::Common;

#[derive(Clone, Copy, ValueEnum)]
pub enum OracleKind {
    PointMass,
    Zkb,
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Parse(_) | Error::Validation { .. }) => 2,
        Some(Error::Admissibility(_)) => 3,
        Some(Error::NonConvergence { .. } | Error::SingularX { .. } | Error::SingularPreconditioner(_)) => 4,
        Some(
            Error::CertificateBreach { .. }
            | Error::BoundBreach { .. }
            | Error::NegativityBreach { .. }
            | Error::CflViolation { .. },
        ) => 5,
        Some(Error::Domain { .. } | Error::EmptyMeasure | Error::MassMismatch { .. } | Error::DegenerateState) => 6,
        None => 1,
    }
}

struct Loaded {
    config: Config,
    u0: GridField,
}

fn load_config(common: &Common) -> Result<Config> {
    let path = common.config.as_ref().ok_or_else(|| anyhow!("--config is required for this command"))?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = if common.overrides.is_empty() {
        Config::from_json_str(&text)
    } else {
        let mut v: Value = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        for o in &common.overrides {
            Config::apply_override(&mut v, o)?;
        }
        Config::from_value(v)
    };
    cfg.with_context(|| format!("config::parse_config {}", path.display()))
}

fn load(common: &Common) -> Result<Loaded> {
    let config = load_config(common)?;
    let csv = match &config.initial {
        InitialConfig::File { path } => {
            let base = common.config.as_ref().and_then(|p| p.parent()).unwrap_or(Path::new("."));
            let full = base.join(path);
            Some(fs::read_to_string(&full).with_context(|| format!("reading initial data {}", full.display()))?)
        }
        _ => None,
    };
    let u0 = config.initial_field(csv.as_deref()).context("config::initial_field")?;
    Ok(Loaded { config, u0 })
}

fn say(common: &Common, line: impl AsRef<str>) {
    if !common.quiet {
        println!("{}", line.as_ref());
    }
}

fn state_table(states: &[State]) -> String {
    let rows: Vec<String> = states
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let d = &s.diagnostics;
            format!("{k},{},{},{},{},{}", num(s.t), num(d.mass), num(d.max), num(d.support_radius), num(d.d1_bound))
        })
        .collect();
    format!("index,t,mass,max,support_radius,d1_bound\n{}\n", rows.join("\n"))
}

fn write_states(out: &mut OutDir, states: &[State]) -> Result<()> {
    for (k, s) in states.iter().enumerate() {
        out.write(&format!("u_{k:04}.csv"), &field_csv(&s.u, "u"))?;
    }
    out.write("states.csv", &state_table(states))
}

fn write_coupled(out: &mut OutDir, run: &CoupledRun) -> Result<()> {
    write_states(out, &run.states)?;
    for (k, w) in run.w.iter().enumerate() {
        out.write(&format!("w_{k:04}.csv"), &nodes_csv(&w.nodes, &[("w", &w.values)]))?;
    }
    Ok(())
}

fn coupled(common: &Common, command: &str, mode: Mode) -> Result<()> {
    let Loaded { config, u0 } = load(common)?;
    let mut out = OutDir::create(&common.out)?;
    if config.binding.as_ref().is_some_and(|b| b.enabled) {
        let setup = Setup::new(&config, u0).context("coupled::setup")?;
        info!(
            "certificate r1 = {:.3e}, r2 = {:.3e}; horizon {:.4e}",
            setup.certificate.r1, setup.certificate.r2, setup.horizon.used
        );
        let run = match mode {
            Mode::TimeMarching => run_time_marching(&setup).context("coupled::run_time_marching")?,
            Mode::GlobalPicard => run_global_picard(&setup, config.run.picard_tol, config.run.max_outer)
                .context("coupled::run_global_picard")?,
        };
        write_coupled(&mut out, &run)?;
        let r = &run.report;
        say(
            common,
            format!(
                "{command}: {} steps to t = {:.6e}, mass drift {:.3e}, KR max {:.3e} of {:.3e}",
                r.steps,
                r.final_t,
                r.monitors.mass_drift_max,
                r.monitors.kr_max,
                r.monitors.kr_limit
            ),
        );
        out.finish(command, Some(&config), serde_json::to_value(&run.report)?)
    } else {
        if matches!(mode, Mode::GlobalPicard) {
            bail!("{command}: global Picard needs an enabled binding section");
        }
        let traj = run_uncoupled(&config, &u0).context("pm_solver::march")?;
        write_states(&mut out, &traj.states)?;
        let last = traj.last();
        say(
            common,
            format!(
                "{command}: {} steps to t = {:.6e}, mass drift {:.3e}",
                last.diagnostics.steps,
                last.t,
                last.mass_drift()
            ),
        );
        out.finish(
            command,
            Some(&config),
            json!({ "final": last.diagnostics, "final_t": last.t, "mass_drift": last.mass_drift() }),
        )
    }
}

pub fn simulate(common: &Common) -> Result<()> {
    let mode = load_config(common)?.run.mode;
    coupled(common, "simulate", mode)
}

pub fn picard(common: &Common) -> Result<()> {
    coupled(common, "picard", Mode::GlobalPicard)
}

pub fn binding_solve(common: &Common) -> Result<()> {
    let Loaded { config, u0 } = load(common)?;
    let b = config
        .binding
        .clone()
        .filter(|b| b.enabled)
        .ok_or_else(|| anyhow!("binding-solve needs an enabled binding section"))?;
    let nodes = config.nodes()?.expect("binding enabled");
    let ctx = BindingContext::new(config.kernel(b.rho)?, nodes.clone())?;
    let mu = binding_measure(&u0, b.rho, 0.0).context("coupled::binding_measure at t = 0")?;
    let problem = ctx.problem(&mu, 0.0)?;
    let out = solve_binding_picard(&problem, &BindingField::constant(nodes.clone(), 0.5), &b.picard())
        .context("binding::solve_binding_picard at t = 0")?;
    let mut dir = OutDir::create(&common.out)?;
    dir.write("w.csv", &nodes_csv(&nodes, &[("w", &out.field.values)]))?;
    say(
        common,
        format!(
            "binding-solve: {} iterations, residual {:.3e}, contraction {:.3}, w in [{:.6}, {:.6}]",
            out.iterations,
            out.residual,
            out.contraction,
            out.field.min(),
            out.field.max()
        ),
    );
    dir.finish(
        "binding-solve",
        Some(&config),
        json!({
            "iterations": out.iterations,
            "residual": out.residual,
            "contraction": out.contraction,
            "history": out.history,
            "w_min": out.field.min(),
            "w_max": out.field.max(),
        }),
    )
}

pub fn certificate(common: &Common) -> Result<()> {
    let Loaded { config, u0 } = load(common)?;
    let setup = Setup::new(&config, u0).context("coupled::setup")?;
    let mut out = OutDir::create(&common.out)?;
    out.write_json("certificate.json", &setup.certificate)?;
    let w0 = &setup.anchor.w0;
    out.write("w0.csv", &nodes_csv(&w0.nodes, &[("w", &w0.values)]))?;
    let c = &setup.certificate;
    say(
        common,
        format!(
            "certificate: r1 = {:.6e}, r2 = {:.6e}, lip = {:.6e}, horizon {:.6e}",
            c.r1, c.r2, c.lip_mu, setup.horizon.used
        ),
    );
    out.finish(
        "certificate",
        Some(&config),
        json!({
            "certificate": c,
            "admissibility": setup.admissibility,
            "horizon": setup.horizon,
            "support": setup.support,
        }),
    )
}

fn read_measure(path: &Path) -> Result<DiscreteMeasure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    DiscreteMeasure::from_json_str(&text).with_context(|| format!("measures::parse {}", path.display()))
}

pub fn kr(first: &Path, second: &Path, common: &Common) -> Result<()> {
    let a = read_measure(first)?;
    let b = read_measure(second)?;
    let d = kr_distance(&a, &b).context("measures::kr_distance")?;
    say(common, num(d));
    let out = OutDir::create(&common.out)?;
    out.finish(
        "kr",
        None,
        json!({ "first": first.display().to_string(), "second": second.display().to_string(), "distance": d }),
    )
}

pub fn oracle(kind: OracleKind, mass: Option<f64>, common: &Common) -> Result<()> {
    let Loaded { config, u0 } = load(common)?;
    let mut out = OutDir::create(&common.out)?;
    match kind {
        OracleKind::PointMass => {
            let b = config
                .binding
                .clone()
                .filter(|b| b.enabled)
                .ok_or_else(|| anyhow!("the point-mass oracle needs an enabled binding section"))?;
            let m = mass.unwrap_or_else(|| u0.mass());
            let pm = point_mass_solution(&config.kernel(b.rho)?, m, 0.0).context("binding::point_mass_solution")?;
            let nodes = config.nodes()?.expect("binding enabled");
            let w = pm.profile(&nodes)?;
            let xi: Vec<f64> = nodes.points.iter().map(|x| pm.xi_at(x)).collect::<Result<_, _>>()?;
            out.write("point_mass.csv", &nodes_csv(&nodes, &[("w", &w.values), ("xi", &xi)]))?;
            say(common, format!("w(0) = {}", num(pm.w0())));
            out.finish("oracle", Some(&config), json!({ "kind": "point_mass", "mass": m, "w0": pm.w0() }))
        }
        OracleKind::Zkb => {
            let InitialConfig::Zkb { t0, c } = config.initial else {
                bail!("the ZKB oracle needs `initial.type = zkb`");
            };
            let d = config.dimension;
            let t = t0 + config.run.t_end;
            let g = &u0.grid;
            let rows = g
                .active_cells()
                .map(|i| {
                    let x = g.center(i);
                    (x, vec![zkb_solution(t, &x, c, d)])
                })
                .collect();
            out.write("zkb.csv", &table(d, &["u"], rows))?;
            let r = zkb_radius(t, c, d);
            say(common, format!("zkb at t = {t}: radius {}, mass {}", num(r), num(zkb_mass(c, d))));
            out.finish(
                "oracle",
                Some(&config),
                json!({ "kind": "zkb", "t": t, "radius": r, "mass": zkb_mass(c, d) }),
            )
        }
    }
}

pub fn convergence(levels: usize, common: &Common) -> Result<()> {
    if levels < 2 {
        bail!("--levels must be at least 2");
    }
    let config = load_config(common)?;
    let InitialConfig::Zkb { t0, c } = config.initial else {
        bail!("convergence needs `initial.type = zkb`");
    };
    let d = config.dimension;
    let t_end = config.run.t_end;
    let results: Vec<(f64, f64)> = (0..levels)
        .into_par_iter()
        .map(|k| -> Result<(f64, f64)> {
            let mut cfg = config.clone();
            cfg.solver.h = config.solver.h / 2f64.powi(k as i32);
            let u0 = cfg.initial_field(None)?;
            let solver = cfg.solver_config(zkb_radius(t0, c, d))?;
            let zero = FaceField::zeros(&u0.grid);
            let traj = solve_fixed_velocity(&u0, &zero, &solver, &MarchOptions::adaptive(t_end, t_end.max(f64::MIN_POSITIVE)))
                .with_context(|| format!("pm_solver::march at h = {}", cfg.solver.h))?;
            let exact = GridField::from_fn(u0.grid.clone(), |x| zkb_solution(t0 + t_end, x, c, d));
            Ok((cfg.solver.h, traj.last().u.l1_distance(&exact)))
        })
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = results.iter().map(|r| r.0.ln()).collect();
    let ys: Vec<f64> = results.iter().map(|r| r.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let order = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let mut out = OutDir::create(&common.out)?;
    let body: String = results.iter().map(|(h, e)| format!("{},{}\n", num(*h), num(*e))).collect();
    out.write("convergence.csv", &format!("h,l1_error\n{body}"))?;
    say(common, format!("fitted order {order:.4}"));
    out.finish(
        "convergence",
        Some(&config),
        json!({ "order": order, "levels": results.iter().map(|(h, e)| json!({"h": h, "l1_error": e})).collect::<Vec<_>>() }),
    )
}
