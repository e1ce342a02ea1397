mod common;

use adhesim_core::binding::point_mass_solution;
use adhesim_core::config::{bump_field, AnchorKind};
use adhesim_core::coupled::*;
use adhesim_core::measures::{kr_distance, GridField};
use adhesim_core::pm_solver::{march, FaceField, MarchOptions};
use adhesim_core::Error;
use common::*;

#[test]
fn rescaled_bump_is_admissible_for_point_mass_anchor() {
    let h = 1.0 / 1024.0;
    let v = with(coupled_value(1, h, 1e-4), &[r#"binding.anchor="point_mass""#, "run.allow_inadmissible=true"]);
    let cfg = build(v);
    let probe = cfg.initial_field(None).unwrap();
    let s0 = Setup::new(&cfg, probe).unwrap();
    let lambda = rescaling_threshold(1.0, 0.3, 1e-4, s0.certificate.r2);
    let cfg = build(with(
        coupled_value(1, h, 1e-4),
        &[
            r#"binding.anchor="point_mass""#,
            &format!(r#"initial={{"type":"rescaled_bump","mass":1e-4,"lambda":{lambda}}}"#),
        ],
    ));
    let u0 = cfg.initial_field(None).unwrap();
    let s = Setup::new(&cfg, u0.clone()).unwrap();
    assert_eq!(s.anchor.kind, AnchorKind::PointMass);
    assert!(s.admissibility.admissible(), "{:?}", s.admissibility);

    let heavier = u0.scaled(1.01);
    let rep = admissible_initial(&heavier, &s.anchor.mu0, &s.certificate, 0.3, 1e-4, heavier.max());
    assert!(!rep.mass_ok && !rep.admissible());

    let offset = GridField::from_fn(u0.grid.clone(), |x| if (x[0] - 0.1).abs() < 0.01 { 1.0 } else { 0.0 })
        .normalized_to(1e-4)
        .unwrap();
    let rep = admissible_initial(&offset, &s.anchor.mu0, &s.certificate, 0.3, 1e-4, offset.max());
    assert!(!rep.support_ok);
}

#[test]
fn symmetric_kernels_keep_half() {
    let cfg = build(with(coupled_value(1, 1.0 / 128.0, 1e-4), &["kernels.symmetric=true", "run.t_end=0.02"]));
    let s = Setup::new(&cfg, cfg.initial_field(None).unwrap()).unwrap();
    let run = run_time_marching(&s).unwrap();
    for w in &run.w {
        assert!(w.values.iter().all(|v| (v - 0.5).abs() < 1e-9));
    }
}

#[test]
fn zero_sensitivity_decouples() {
    let cfg = build(with(coupled_value(1, 1.0 / 128.0, 1e-4), &[r#"solver.chi={"type":"zero"}"#]));
    let s = Setup::new(&cfg, cfg.initial_field(None).unwrap()).unwrap();
    let times = s.fixed_schedule();
    let coupled = run_time_marching_with(&s, &MarchOptions::schedule(times.clone())).unwrap();
    let zero = FaceField::zeros(&s.u0.grid);
    let pm = march(s.u0.clone(), 0.0, &s.solver, &MarchOptions::schedule(times), |_, _, _| Ok(zero.clone()), |_, _| Ok(())).unwrap();
    assert_eq!(coupled.last().u.values, pm.last().u.values);
    assert!(coupled.w.iter().all(|w| w.min() > 0.0 && w.max() < 1.0));

    let picard = run_global_picard(&s, 1e-12, 10).unwrap();
    assert_eq!(picard.report.picard.unwrap().iterations, 1);
}

#[test]
fn near_point_mass_binding_matches_oracle() {
    let h = 1.0 / 512.0;
    let cfg = build(with(
        coupled_value(1, h, 1e-4),
        &[r#"binding.anchor="point_mass""#, r#"initial={"type":"bump","radius":0.003,"mass":1e-4}"#],
    ));
    let s = Setup::new(&cfg, cfg.initial_field(None).unwrap()).unwrap();
    let run = run_time_marching_with(&s, &MarchOptions::schedule(vec![0.0])).unwrap();
    let pm = point_mass_solution(&s.ctx.kernel, 1e-4, 0.0).unwrap();
    let oracle = pm.profile(&s.ctx.nodes).unwrap();
    let mu = binding_measure(&s.u0, 0.3, 0.0).unwrap();
    let kr = kr_distance(&mu, &s.anchor.mu0).unwrap();
    let dist = run.w[0].distance(&oracle);
    assert!(dist <= s.certificate.lip_mu * kr, "{dist} > {} * {kr}", s.certificate.lip_mu);
}

#[test]
fn one_step_picard_matches_marching() {
    let cfg = build(coupled_value(1, 1.0 / 128.0, 1e-4));
    let mut s = Setup::new(&cfg, cfg.initial_field(None).unwrap()).unwrap();
    let dt = s.fixed_dt();
    s.horizon.used = dt;
    let picard = run_global_picard(&s, 1e-12, 10).unwrap();
    let marching = run_time_marching_with(&s, &MarchOptions::schedule(vec![0.0, dt])).unwrap();
    let gap = picard.last().u.l1_distance(&marching.last().u);
    assert!(gap <= dt * dt * s.mass, "{gap}");
}

#[test]
fn lipschitz_probe_edge_cases() {
    let cfg = build(with(coupled_value(1, 1.0 / 128.0, 1e-4), &["run.t_end=0.01"]));
    let s = Setup::new(&cfg, cfg.initial_field(None).unwrap()).unwrap();
    let same = lipschitz_probe(&s, &s.u0).unwrap();
    assert!(same.exact_match && same.ratio.is_none());
    let heavier = s.u0.scaled(1.001);
    assert!(matches!(lipschitz_probe(&s, &heavier), Err(Error::Admissibility(_))));
}

#[test]
fn binding_trajectory_is_lipschitz_in_density() {
    let cfg = build(coupled_value(1, 1.0 / 128.0, 1e-4));
    let s = Setup::new(&cfg, cfg.initial_field(None).unwrap()).unwrap();
    let run = run_time_marching_with(&s, &MarchOptions::schedule(s.fixed_schedule())).unwrap();
    for k in 1..run.states.len() {
        let a = binding_measure(&run.states[k - 1].u, 0.3, 0.0).unwrap();
        let b = binding_measure(&run.states[k].u, 0.3, 0.0).unwrap();
        let b = b.scaled(a.total_mass() / b.total_mass());
        let kr = kr_distance(&a, &b).unwrap();
        let sup = run.w[k]
            .values
            .iter()
            .zip(&run.w[k - 1].values)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(sup <= s.certificate.lip_mu * kr + 2.0 * s.binding.tol);
    }
}

#[test]
fn heavy_data_breach_the_certificate() {
    let cfg = build(with(coupled_value(1, 1.0 / 128.0, 5e-3), &["run.t_end=0.05", "run.ignore_horizon=true"]));
    let s = Setup::new(&cfg, cfg.initial_field(None).unwrap()).unwrap();
    match run_time_marching(&s) {
        Err(Error::CertificateBreach { monitor, t, value, limit }) => {
            assert_eq!(monitor, "kr");
            assert!(t > 0.0 && value > limit);
        }
        other => panic!("expected a breach, got {:?}", other.map(|r| r.report.final_t)),
    }
}

#[test]
fn inadmissible_data_need_override() {
    let v = coupled_value(1, 1.0 / 128.0, 1e-4);
    let cfg = build(with(v.clone(), &[r#"initial={"type":"bump","radius":0.2,"mass":1e-4}"#]));
    let u0 = cfg.initial_field(None).unwrap();
    assert!(matches!(Setup::new(&cfg, u0.clone()), Err(Error::Admissibility(_))));
    let grid = u0.grid.clone();
    let cfg = build(with(v, &[r#"initial={"type":"bump","radius":0.2,"mass":1e-4}"#, "run.allow_inadmissible=true"]));
    let narrow = bump_field(grid, 0.2, 1e-4).unwrap();
    let s = Setup::new(&cfg, narrow);
    assert!(matches!(s, Err(Error::Admissibility(_))));
}
