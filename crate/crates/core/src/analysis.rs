//! Closed-form reference solutions and the constants of the support and
//! a-priori bounds.

use serde::{Deserialize, Serialize};

use crate::geometry::{norm, Point};
use crate::measures::GridField;
use crate::{Error, Result};

/// Parameters of `U_{a,b}(t, x) = a (b² e^{8at} − |x|²)₊`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupersolutionParams {
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    pub rho: f64,
    pub t_max: f64,
}

pub fn supersolution_value(p: &SupersolutionParams, t: f64, x: &Point) -> f64 {
    let r = norm(x);
    (p.a * (p.b * p.b * (8.0 * p.a * t).exp() - r * r)).max(0.0)
}

/// Radius `b e^{4at}` of the support of `U_{a,b}(t, ·)`.
pub fn supersolution_radius(p: &SupersolutionParams, t: f64) -> f64 {
    p.b * (4.0 * p.a * t).exp()
}

/// Lipschitz constant of `U_{a,b}(t, ·)`.
pub fn supersolution_lipschitz(p: &SupersolutionParams, t: f64) -> f64 {
    2.0 * p.a * supersolution_radius(p, t)
}

/// Bounds entering the support-control constants.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SupportInputs {
    pub dim: usize,
    /// `sup |χ|` over the admissible range of `u`.
    pub chi_sup: f64,
    pub chi_deriv_sup: f64,
    /// Bound on the negative part of `∇·V`.
    pub div_v_neg: f64,
    /// Bound on `|V|`.
    pub v_sup: f64,
    pub m_inf: f64,
    pub rho: f64,
    /// Radius of the support of the initial datum.
    pub u0_support: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SupportReport {
    pub params: SupersolutionParams,
    pub t_support: f64,
    pub drift: f64,
    pub rho_hat: f64,
    pub rho_reach: f64,
}

pub fn support_constants(inp: &SupportInputs) -> Result<SupportReport> {
    let d = inp.dim as f64;
    let rho = inp.rho;
    if !(rho > 0.0) {
        return Err(Error::Admissibility("rho must be positive".into()));
    }
    let delta = 0.25;
    let b = 0.5 * rho;
    if inp.u0_support > delta * rho * (1.0 + 1e-12) {
        return Err(Error::Admissibility(format!(
            "initial support radius {} exceeds rho/4 = {}",
            inp.u0_support,
            delta * rho
        )));
    }
    let slope = inp.v_sup * inp.chi_deriv_sup;
    let rho_hat = if slope > 0.0 { (d + 2.0) / slope } else { f64::INFINITY };
    if rho > rho_hat {
        return Err(Error::Admissibility(format!(
            "rho = {rho} exceeds the drift limit {rho_hat}"
        )));
    }
    let drift = inp.div_v_neg * inp.chi_sup / (4.0 * (d + 2.0));
    let a_mass = inp.m_inf / (b * b - (delta * rho).powi(2));
    let a_drift = 1.0 + drift / (1.0 - b / rho_hat);
    let a = a_mass.max(a_drift);
    let rho_reach = (1.0 - drift / a) * rho_hat;
    let t_support = (rho.min(rho_reach) / b).ln() / (8.0 * a);
    Ok(SupportReport {
        params: SupersolutionParams {
            a,
            b,
            delta,
            rho,
            t_max: t_support,
        },
        t_support,
        drift,
        rho_hat,
        rho_reach,
    })
}

/// `sup |∇·V|` for `V = w̃ (∇H⋆u)` given `‖w̃‖_{W^{1,∞}} ≤ w_norm`,
/// `|∇H| ≤ f_sup`, `|ΔH| ≤ lap_tv`, mass `m` and `‖u‖_∞ ≤ u_sup`.
pub fn divergence_bound(w_norm: f64, f_sup: f64, mass: f64, lap_tv: f64, u_sup: f64) -> f64 {
    w_norm * (f_sup * mass + lap_tv * u_sup)
}

/// Source solution of `∂_t u = Δu²`.
pub fn zkb_solution(t: f64, x: &Point, c: f64, d: usize) -> f64 {
    let (alpha, beta, k) = zkb_exponents(d);
    let r = norm(x);
    t.powf(-alpha) * (c - k * r * r * t.powf(-2.0 * beta)).max(0.0)
}

/// `(α, β, k)` with `α = d/(d+2)`, `β = 1/(d+2)`, `k = α/(4d)`.
pub fn zkb_exponents(d: usize) -> (f64, f64, f64) {
    let d = d as f64;
    let alpha = d / (d + 2.0);
    (alpha, 1.0 / (d + 2.0), alpha / (4.0 * d))
}

pub fn zkb_radius(t: f64, c: f64, d: usize) -> f64 {
    let (_, beta, k) = zkb_exponents(d);
    (c / k).sqrt() * t.powf(beta)
}

pub fn zkb_mass(c: f64, d: usize) -> f64 {
    let (_, _, k) = zkb_exponents(d);
    let r = (c / k).sqrt();
    let dd = d as f64;
    let area = crate::geometry::sphere_area(d);
    area * (c * r.powf(dd) / dd - k * r.powf(dd + 2.0) / (dd + 2.0))
}

pub fn support_radius(u: &GridField, threshold: f64) -> f64 {
    u.support_radius(threshold)
}

/// `u0_max · exp(T · chi_sup · divV_sup)`.
pub fn max_bound_d1(t: f64, chi_sup: f64, div_v_sup: f64, u0_max: f64) -> f64 {
    u0_max * (t * chi_sup * div_v_sup).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::point;
    use crate::measures::Grid;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn params() -> SupersolutionParams {
        SupersolutionParams {
            a: 1.0,
            b: 0.5,
            delta: 0.25,
            rho: 1.0,
            t_max: 1.0,
        }
    }

    #[test]
    fn supersolution_examples() {
        let p = params();
        assert_eq!(supersolution_value(&p, 0.0, &point(&[0.0])), 0.25);
        let t = 0.05;
        let r = supersolution_radius(&p, t);
        assert!(supersolution_value(&p, t, &point(&[r, 0.0])).abs() < 1e-15);
        assert_eq!(supersolution_value(&p, t, &point(&[r * 1.01])), 0.0);
    }

    fn supersolution_residual(d: usize, h: f64) -> f64 {
        let p = SupersolutionParams {
            a: 1.3,
            ..params()
        };
        let t = 0.02;
        let dt = h;
        let u = |t: f64, x: &Point| supersolution_value(&p, t, x);
        let inner = 0.5 * supersolution_radius(&p, t);
        let mut worst = 0.0f64;
        let n = 7;
        for i in 0..n {
            let r = inner * i as f64 / n as f64;
            let mut x = [0.0; 3];
            x[0] = r * 0.8;
            if d > 1 {
                x[1] = r * 0.6;
            }
            let ut = (u(t + dt, &x) - u(t - dt, &x)) / (2.0 * dt);
            let mut lap = 0.0;
            for k in 0..d {
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                lap += (u(t, &xp).powi(2) - 2.0 * u(t, &x).powi(2) + u(t, &xm).powi(2)) / (h * h);
            }
            let res = ut - lap - 4.0 * (d as f64 + 2.0) * p.a * u(t, &x);
            worst = worst.max(res.abs());
        }
        worst
    }

    #[test]
    fn supersolution_residual_is_second_order() {
        for d in [1, 2] {
            let e1 = supersolution_residual(d, 1e-2);
            let e2 = supersolution_residual(d, 5e-3);
            assert!(e2 < 1e-2);
            assert!(e1 / e2 > 3.5, "{e1} {e2}");
        }
    }

    #[test]
    fn support_constants_examples() {
        let base = SupportInputs {
            dim: 1,
            chi_sup: 0.0,
            chi_deriv_sup: 0.0,
            div_v_neg: 0.0,
            v_sup: 0.0,
            m_inf: 0.1,
            rho: 0.4,
            u0_support: 0.1,
        };
        let r = support_constants(&base).unwrap();
        let b = 0.2;
        assert_relative_eq!(b * b - (0.1f64).powi(2), 3.0 / 16.0 * 0.16, max_relative = 1e-14);
        assert_relative_eq!(r.params.a, (0.1f64 / (3.0 / 16.0 * 0.16)).max(1.0), max_relative = 1e-14);
        assert!(r.t_support > 0.0);

        let doubled = support_constants(&SupportInputs { m_inf: 0.2, ..base }).unwrap();
        assert_relative_eq!(doubled.params.a, 2.0 * r.params.a, max_relative = 1e-14);
        assert!(doubled.t_support < r.t_support);

        let drift = SupportInputs {
            chi_sup: 1.0,
            chi_deriv_sup: 1.0,
            div_v_neg: 50.0,
            v_sup: 1.0,
            ..base
        };
        let rd = support_constants(&drift).unwrap();
        assert!(rd.params.a > 1.0 && rd.rho_reach > rd.params.b && rd.t_support > 0.0);

        let too_wide = SupportInputs { v_sup: 10.0, chi_deriv_sup: 1.0, ..base };
        assert!(matches!(support_constants(&too_wide), Err(Error::Admissibility(_))));
        let far = SupportInputs { u0_support: 0.2, ..base };
        assert!(matches!(support_constants(&far), Err(Error::Admissibility(_))));
    }

    #[test]
    fn zkb_examples() {
        let (a, b, k) = zkb_exponents(1);
        assert_relative_eq!(a, 1.0 / 3.0);
        assert_relative_eq!(b, 1.0 / 3.0);
        assert_relative_eq!(k, 1.0 / 12.0);
        let t: f64 = 0.3;
        let x = 0.2;
        let expected = t.powf(-1.0 / 3.0) * (0.25 - x * x / (12.0 * t.powf(2.0 / 3.0)));
        assert_relative_eq!(zkb_solution(t, &point(&[x]), 0.25, 1), expected, max_relative = 1e-14);

        for d in [1usize, 2] {
            let c = 0.25;
            let (tt, h) = (0.4, 1e-3);
            let pts: [Point; 3] = [point(&[0.1, 0.05]), point(&[0.3, -0.2]), point(&[0.0, 0.0])];
            for x0 in pts.iter() {
                let x = &point(&x0[..d]);
                let u = |t: f64, x: &Point| zkb_solution(t, x, c, d);
                let ut = (u(tt + h, x) - u(tt - h, x)) / (2.0 * h);
                let mut lap = 0.0;
                for kk in 0..d {
                    let mut xp = *x;
                    let mut xm = *x;
                    xp[kk] += h;
                    xm[kk] -= h;
                    lap += (u(tt, &xp).powi(2) - 2.0 * u(tt, x).powi(2) + u(tt, &xm).powi(2)) / (h * h);
                }
                assert!((ut - lap).abs() < 1e-4, "d={d} residual {}", ut - lap);
            }
        }
    }

    #[test]
    fn zkb_mass_is_constant() {
        let c = 0.25;
        for d in [1usize, 2] {
            let exact = zkb_mass(c, d);
            for t in [0.1, 0.5, 2.0] {
                let r = zkb_radius(t, c, d);
                let n = 200_000;
                let quad: f64 = (0..n)
                    .map(|i| {
                        let s = (i as f64 + 0.5) * r / n as f64;
                        let x = point(&[s]);
                        zkb_solution(t, &x, c, d) * crate::geometry::sphere_area(d) * s.powi(d as i32 - 1) * r / n as f64
                    })
                    .sum();
                assert_relative_eq!(quad, exact, max_relative = 1e-10);
            }
        }
        let r1 = zkb_radius(1.0, c, 1);
        assert_relative_eq!(zkb_radius(8.0, c, 1), r1 * 8f64.powf(1.0 / 3.0), max_relative = 1e-14);
    }

    #[test]
    fn support_radius_examples() {
        let h = 0.01;
        let grid = Arc::new(Grid::new(2, h, 1.0).unwrap());
        assert_eq!(support_radius(&GridField::zeros(grid.clone()), 0.0), 0.0);
        let ind = GridField::from_fn(grid.clone(), |x| if norm(x) <= 0.2 { 1.0 } else { 0.0 });
        assert!((support_radius(&ind, 1e-12) - 0.2).abs() <= h);
        let t = 0.3;
        let z = GridField::from_fn(grid, |x| zkb_solution(t, x, 0.1, 2));
        assert!((support_radius(&z, 1e-12) - zkb_radius(t, 0.1, 2)).abs() <= h);
    }

    #[test]
    fn d1_examples() {
        assert_eq!(max_bound_d1(3.0, 2.0, 0.0, 0.7), 0.7);
        assert_relative_eq!(max_bound_d1(1.0, 1.0, 2f64.ln(), 1.0), 2.0, max_relative = 1e-15);
        let base = max_bound_d1(1.0, 1.0, 1.0, 1.0);
        assert!(max_bound_d1(1.1, 1.0, 1.0, 1.0) >= base);
        assert!(max_bound_d1(1.0, 1.1, 1.0, 1.0) >= base);
        assert!(max_bound_d1(1.0, 1.0, 1.1, 1.0) >= base);
        assert!(max_bound_d1(1.0, 1.0, 1.0, 1.1) >= base);
    }
}
