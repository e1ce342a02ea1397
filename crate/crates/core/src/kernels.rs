//! Interaction kernels `G±`, the adhesion potential `H` and the convolution
//! operators `∇H⋆u` and `ΔH⋆u`.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{dist, midpoint, norm, sphere_area, Point, ORIGIN};
use crate::measures::GridField;
use crate::{Error, Result};

pub type VectorField = Vec<Point>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

/// Positive modulation `K(t, x)` evaluated at pair midpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Modulation {
    Constant { value: f64 },
    /// `base + amplitude * exp(-|x|^2 / (2 width^2))`
    Gaussian { base: f64, amplitude: f64, width: f64 },
    /// `base + slope * t`
    AffineT { base: f64, slope: f64 },
}

impl Modulation {
    pub fn eval(&self, t: f64, x: &Point) -> f64 {
        match *self {
            Modulation::Constant { value } => value,
            Modulation::Gaussian {
                base,
                amplitude,
                width,
            } => {
                let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
                base + amplitude * (-r2 / (2.0 * width * width)).exp()
            }
            Modulation::AffineT { base, slope } => base + slope * t,
        }
    }

    pub fn is_time_independent(&self) -> bool {
        !matches!(self, Modulation::AffineT { slope, .. } if *slope != 0.0)
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let bad = |reason: &str| Err(Error::validation(field, reason));
        match *self {
            Modulation::Constant { value } => {
                if !(value > 0.0 && value.is_finite()) {
                    return bad("constant modulation must be positive");
                }
            }
            Modulation::Gaussian {
                base,
                amplitude,
                width,
            } => {
                if !(base > 0.0 && base + amplitude.min(0.0) > 0.0) {
                    return bad("gaussian modulation must stay positive (base > 0, base + amplitude > 0)");
                }
                if !(width > 0.0) {
                    return bad("gaussian width must be positive");
                }
            }
            Modulation::AffineT { base, .. } => {
                if !(base > 0.0) {
                    return bad("affine modulation needs base > 0");
                }
            }
        }
        Ok(())
    }
}

/// Radial adhesion strength `F` on `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileKind {
    Constant { value: f64 },
    /// `f0 + (f1 - f0) s`
    Linear { f0: f64, f1: f64 },
    /// `f0 * exp(-rate s)`
    Exponential { f0: f64, rate: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadialProfile {
    pub kind: ProfileKind,
    pub f_max: f64,
    pub f1: f64,
}

impl RadialProfile {
    pub fn new(kind: ProfileKind) -> Result<Self> {
        let ok = match &kind {
            ProfileKind::Constant { value } => value.is_finite(),
            ProfileKind::Linear { f0, f1 } => f0.is_finite() && f1.is_finite(),
            ProfileKind::Exponential { f0, rate } => f0.is_finite() && rate.is_finite(),
        };
        if !ok {
            return Err(Error::validation("kernels.f", "parameters must be finite"));
        }
        let mut p = RadialProfile {
            kind,
            f_max: 0.0,
            f1: 0.0,
        };
        let n = 4096;
        p.f_max = (0..=n)
            .map(|i| p.f(i as f64 / n as f64).abs())
            .fold(0.0, f64::max);
        p.f1 = p.f(1.0);
        Ok(p)
    }

    pub fn f(&self, s: f64) -> f64 {
        match self.kind {
            ProfileKind::Constant { value } => value,
            ProfileKind::Linear { f0, f1 } => f0 + (f1 - f0) * s,
            ProfileKind::Exponential { f0, rate } => f0 * (-rate * s).exp(),
        }
    }

    pub fn df(&self, s: f64) -> f64 {
        match self.kind {
            ProfileKind::Constant { .. } => 0.0,
            ProfileKind::Linear { f0, f1 } => f1 - f0,
            ProfileKind::Exponential { f0, rate } => -rate * f0 * (-rate * s).exp(),
        }
    }
}

/// Binding (`+`) and unbinding (`-`) kernels
/// `G±(x, y) = φ±(|x - y|) K±(t, (x + y) / 2)`.
///
/// With `symmetric` set, `G-` is taken equal to `G+`.
#[derive(Clone, Debug)]
pub struct InteractionKernel {
    pub a_plus: f64,
    pub a_minus: f64,
    pub b_plus: f64,
    pub b_minus: f64,
    pub k_plus: Modulation,
    pub k_minus: Modulation,
    pub symmetric: bool,
    /// Largest admissible separation for `φ-`.
    pub s_cap: f64,
}

impl InteractionKernel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a_plus: f64,
        a_minus: f64,
        b_plus: f64,
        b_minus: f64,
        k_plus: Modulation,
        k_minus: Modulation,
        symmetric: bool,
        s_cap: f64,
    ) -> Result<Self> {
        for (name, a) in [("kernels.a_plus", a_plus), ("kernels.a_minus", a_minus)] {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::validation(name, "exponents a± must satisfy a± > 0"));
            }
        }
        for (name, b) in [("kernels.b_plus", b_plus), ("kernels.b_minus", b_minus)] {
            if !(b >= 2.0 && b.is_finite()) {
                return Err(Error::validation(name, "exponents b± must satisfy b± >= 2"));
            }
        }
        k_plus.validate("kernels.k_plus")?;
        k_minus.validate("kernels.k_minus")?;
        if !(s_cap > 0.0 && s_cap < 1.0) {
            return Err(Error::validation("kernels.s_cap", "must lie in (0, 1)"));
        }
        Ok(InteractionKernel {
            a_plus,
            a_minus,
            b_plus,
            b_minus,
            k_plus,
            k_minus,
            symmetric,
            s_cap,
        })
    }

    /// Constant modulations, `a± = 1`, `b± = 2`.
    pub fn simple(k_plus: f64, k_minus: f64, s_cap: f64) -> Result<Self> {
        Self::new(
            1.0,
            1.0,
            2.0,
            2.0,
            Modulation::Constant { value: k_plus },
            Modulation::Constant { value: k_minus },
            false,
            s_cap,
        )
    }

    pub fn is_time_independent(&self) -> bool {
        self.k_plus.is_time_independent() && self.k_minus.is_time_independent()
    }

    fn effective(&self, sign: Sign) -> Sign {
        if self.symmetric {
            Sign::Plus
        } else {
            sign
        }
    }

    fn phi_raw(&self, sign: Sign, s: f64) -> f64 {
        match sign {
            Sign::Plus => {
                if s >= 1.0 {
                    0.0
                } else {
                    (1.0 - s.powf(self.b_plus)).powf(self.a_plus)
                }
            }
            Sign::Minus => (1.0 - s.powf(self.b_minus)).powf(-self.a_minus),
        }
    }

    pub fn phi(&self, sign: Sign, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::domain("phi", format!("negative distance {s}")));
        }
        if sign == Sign::Minus && s > self.s_cap * (1.0 + 1e-12) {
            return Err(Error::domain(
                "phi",
                format!("distance {s} beyond the cap {}", self.s_cap),
            ));
        }
        Ok(self.phi_raw(sign, s))
    }

    pub fn modulation(&self, sign: Sign) -> &Modulation {
        match self.effective(sign) {
            Sign::Plus => &self.k_plus,
            Sign::Minus => &self.k_minus,
        }
    }

    fn g_raw(&self, sign: Sign, t: f64, x: &Point, y: &Point) -> f64 {
        let e = self.effective(sign);
        self.phi_raw(e, dist(x, y)) * self.modulation(sign).eval(t, &midpoint(x, y))
    }

    pub fn g(&self, sign: Sign, t: f64, x: &Point, y: &Point) -> Result<f64> {
        let e = self.effective(sign);
        let phi = self.phi(e, dist(x, y))?;
        let k = self.modulation(sign).eval(t, &midpoint(x, y));
        if !(k > 0.0) {
            return Err(Error::domain("G", format!("modulation {k} is not positive at t = {t}")));
        }
        Ok(phi * k)
    }

    /// Dense kernel matrix with entry `(i, j) = G(rows[i], cols[j])`.
    pub fn g_matrix_rect(&self, sign: Sign, t: f64, rows: &[Point], cols: &[Point]) -> Result<DMatrix<f64>> {
        let n = rows.len();
        let mut data = vec![0.0; n * cols.len()];
        data.par_chunks_mut(n.max(1))
            .zip(cols.par_iter())
            .try_for_each(|(col, y)| -> Result<()> {
                for (c, x) in col.iter_mut().zip(rows) {
                    *c = self.g(sign, t, x, y)?;
                }
                Ok(())
            })?;
        Ok(DMatrix::from_vec(n, cols.len(), data))
    }

    pub fn g_matrix(&self, sign: Sign, t: f64, nodes: &[Point]) -> Result<DMatrix<f64>> {
        self.g_matrix_rect(sign, t, nodes, nodes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KernelBounds {
    pub c_upper: f64,
    pub c_lower: f64,
}

fn ball_samples(dim: usize, rho: f64) -> Vec<Point> {
    let mut pts = Vec::new();
    match dim {
        1 => {
            let n = 40;
            for i in 0..=n {
                let mut p = ORIGIN;
                p[0] = -rho + 2.0 * rho * i as f64 / n as f64;
                pts.push(p);
            }
        }
        _ => {
            let n: i64 = if dim == 2 { 8 } else { 3 };
            let step = rho / n as f64;
            let span = if dim == 3 { n } else { 0 };
            for i in -n..=n {
                for j in -n..=n {
                    for k in -span..=span {
                        let p = [i as f64 * step, j as f64 * step, k as f64 * step];
                        if norm(&p) <= rho * (1.0 + 1e-12) {
                            pts.push(p);
                        }
                    }
                }
            }
            let m = 24;
            for a in 0..m {
                let th = 2.0 * std::f64::consts::PI * a as f64 / m as f64;
                pts.push([rho * th.cos(), rho * th.sin(), 0.0]);
            }
        }
    }
    pts
}

/// Sampled upper bound on `G±` and its first two derivatives, and lower
/// bound on `G±`, over pairs in the closed ball of radius `rho` and times in
/// `t_range`.
pub fn kernel_bounds(kernel: &InteractionKernel, dim: usize, t_range: (f64, f64), rho: f64) -> Result<KernelBounds> {
    if !(rho > 0.0 && rho < 0.5) {
        return Err(Error::domain("kernel_bounds", format!("rho = {rho} must lie in (0, 1/2)")));
    }
    let pts = ball_samples(dim, rho);
    let nt = if t_range.1 > t_range.0 { 5 } else { 1 };
    let times: Vec<f64> = (0..nt)
        .map(|i| {
            if nt == 1 {
                t_range.0
            } else {
                t_range.0 + (t_range.1 - t_range.0) * i as f64 / (nt - 1) as f64
            }
        })
        .collect();
    let delta = (1e-3 * rho).min(0.25 * (1.0 - 2.0 * rho));
    let mut upper = 0.0f64;
    let mut lower = f64::INFINITY;
    for &t in &times {
        for sign in [Sign::Plus, Sign::Minus] {
            let (u, l) = pts
                .par_iter()
                .map(|x| {
                    let mut u = 0.0f64;
                    let mut l = f64::INFINITY;
                    for y in &pts {
                        let g0 = kernel.g_raw(sign, t, x, y);
                        u = u.max(g0.abs());
                        l = l.min(g0);
                        for k in 0..dim {
                            for moving_x in [true, false] {
                                let shift = |s: f64| {
                                    let (mut a, mut b) = (*x, *y);
                                    if moving_x {
                                        a[k] += s;
                                    } else {
                                        b[k] += s;
                                    }
                                    kernel.g_raw(sign, t, &a, &b)
                                };
                                let gp = shift(delta);
                                let gm = shift(-delta);
                                u = u.max(((gp - gm) / (2.0 * delta)).abs());
                                u = u.max(((gp - 2.0 * g0 + gm) / (delta * delta)).abs());
                            }
                        }
                    }
                    (u, l)
                })
                .reduce(|| (0.0, f64::INFINITY), |a, b| (a.0.max(b.0), a.1.min(b.1)));
            upper = upper.max(u);
            lower = lower.min(l);
        }
    }
    if !(lower > 0.0) {
        return Err(Error::domain("kernel_bounds", "kernel lower bound is not positive"));
    }
    Ok(KernelBounds {
        c_upper: upper,
        c_lower: lower,
    })
}

/// `H` enters only through `∇H(x) = -F(|x|) x / |x|` on the unit ball and
/// the measure `ΔH`.
#[derive(Clone, Debug)]
pub struct AdhesionPotential {
    pub dim: usize,
    pub profile: RadialProfile,
}

impl AdhesionPotential {
    pub fn new(dim: usize, profile: RadialProfile) -> Self {
        AdhesionPotential { dim, profile }
    }

    pub fn grad(&self, x: &Point) -> Point {
        let r = norm(x);
        if r == 0.0 || r >= 1.0 {
            return ORIGIN;
        }
        let s = -self.profile.f(r) / r;
        [s * x[0], s * x[1], s * x[2]]
    }

    pub fn grad_sup(&self) -> f64 {
        self.profile.f_max
    }

    /// Absolutely continuous density of `ΔH` at radius `r ∈ (0, 1)`.
    pub fn lap_density(&self, r: f64) -> f64 {
        let p = &self.profile;
        if self.dim == 1 {
            -p.df(r)
        } else {
            -(p.df(r) + (self.dim as f64 - 1.0) * p.f(r) / r)
        }
    }

    /// Weight carried by the unit sphere (per unit surface measure), `d >= 2`.
    pub fn surface_weight(&self) -> f64 {
        self.profile.f1
    }

    /// Point masses of `ΔH` in one dimension.
    pub fn atoms_1d(&self) -> [(f64, f64); 3] {
        let p = &self.profile;
        [(-1.0, p.f1), (0.0, -2.0 * p.f(0.0)), (1.0, p.f1)]
    }

    /// Closed-form total variation of `ΔH`.
    pub fn lap_tv_bound(&self) -> f64 {
        let p = &self.profile;
        let n = 20000;
        let d = self.dim as f64;
        if self.dim == 1 {
            let int: f64 = (0..n)
                .map(|i| p.df((i as f64 + 0.5) / n as f64).abs() / n as f64)
                .sum();
            2.0 * int + 2.0 * p.f(0.0).abs() + 2.0 * p.f1.abs()
        } else {
            let int: f64 = (0..n)
                .map(|i| {
                    let s = (i as f64 + 0.5) / n as f64;
                    (p.df(s).abs() * s.powf(d - 1.0) + (d - 1.0) * p.f(s).abs() * s.powf(d - 2.0))
                        / n as f64
                })
                .sum();
            sphere_area(self.dim) * (int + p.f1.abs())
        }
    }

    pub fn laplacian_stencil(&self, h: f64) -> LaplacianStencil {
        LaplacianStencil::new(self, h)
    }
}

/// Lattice weights `W_o` with `(ΔH⋆u)(x_i) ≈ Σ_o W_o u(x_i - o h)`.
#[derive(Clone, Debug)]
pub struct LaplacianStencil {
    pub dim: usize,
    pub h: f64,
    pub offsets: Vec<([i64; 3], f64)>,
    /// Total variation of the quadrature measure before lattice lumping.
    pub assembled_tv: f64,
}

impl LaplacianStencil {
    fn new(pot: &AdhesionPotential, h: f64) -> Self {
        let dim = pot.dim;
        let reach = (1.0 / h).ceil() as i64 + 1;
        let q: i64 = match dim {
            1 => 16,
            2 => 8,
            _ => 4,
        };
        let sub = h / q as f64;
        let sub_vol = sub.powi(dim as i32);
        let mut weights: HashMap<[i64; 3], f64> = HashMap::new();
        let mut tv = 0.0;
        let span = |k: usize| if k < dim { reach } else { 0 };
        let half_diag = 0.5 * h * (dim as f64).sqrt();
        for o0 in -span(0)..=span(0) {
            for o1 in -span(1)..=span(1) {
                for o2 in -span(2)..=span(2) {
                    let o = [o0, o1, o2];
                    let c = [o0 as f64 * h, o1 as f64 * h, o2 as f64 * h];
                    if norm(&c) - half_diag >= 1.0 {
                        continue;
                    }
                    let mut acc = 0.0;
                    let sspan = |k: usize| if k < dim { q } else { 1 };
                    for a in 0..sspan(0) {
                        for b in 0..sspan(1) {
                            for e in 0..sspan(2) {
                                let mut y = c;
                                let idx = [a, b, e];
                                for k in 0..dim {
                                    y[k] += -0.5 * h + (idx[k] as f64 + 0.5) * sub;
                                }
                                let r = norm(&y);
                                if r > 0.0 && r < 1.0 {
                                    let w = pot.lap_density(r) * sub_vol;
                                    acc += w;
                                    tv += w.abs();
                                }
                            }
                        }
                    }
                    if acc != 0.0 {
                        *weights.entry(o).or_insert(0.0) += acc;
                    }
                }
            }
        }
        let add_point = |y: &Point, w: f64, weights: &mut HashMap<[i64; 3], f64>| {
            let o = [
                (y[0] / h).round() as i64,
                (y[1] / h).round() as i64,
                (y[2] / h).round() as i64,
            ];
            *weights.entry(o).or_insert(0.0) += w;
        };
        match dim {
            1 => {
                for (x, w) in pot.atoms_1d() {
                    tv += w.abs();
                    let s = x / h;
                    let lo = s.floor();
                    let frac = s - lo;
                    if !(1e-9..=1.0 - 1e-9).contains(&frac) {
                        add_point(&[x, 0.0, 0.0], w, &mut weights);
                    } else {
                        *weights.entry([lo as i64, 0, 0]).or_insert(0.0) += w * (1.0 - frac);
                        *weights.entry([lo as i64 + 1, 0, 0]).or_insert(0.0) += w * frac;
                    }
                }
            }
            2 => {
                let f1 = pot.surface_weight();
                let panels = ((16.0 * std::f64::consts::PI / h).ceil() as usize).max(64 * dim);
                let dw = f1 * 2.0 * std::f64::consts::PI / panels as f64;
                for p in 0..panels {
                    let th = 2.0 * std::f64::consts::PI * (p as f64 + 0.5) / panels as f64;
                    add_point(&[th.cos(), th.sin(), 0.0], dw, &mut weights);
                    tv += dw.abs();
                }
            }
            _ => {
                let f1 = pot.surface_weight();
                let nt = ((2.0 * std::f64::consts::PI / h).ceil() as usize).max(16);
                let np = 2 * nt;
                let dth = std::f64::consts::PI / nt as f64;
                let dph = 2.0 * std::f64::consts::PI / np as f64;
                for i in 0..nt {
                    let th = (i as f64 + 0.5) * dth;
                    for j in 0..np {
                        let ph = (j as f64 + 0.5) * dph;
                        let w = f1 * th.sin() * dth * dph;
                        let y = [th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()];
                        add_point(&y, w, &mut weights);
                        tv += w.abs();
                    }
                }
            }
        }
        let mut offsets: Vec<([i64; 3], f64)> = weights.into_iter().filter(|(_, w)| *w != 0.0).collect();
        offsets.sort_by_key(|a| a.0);
        LaplacianStencil {
            dim,
            h,
            offsets,
            assembled_tv: tv,
        }
    }

    pub fn lumped_tv(&self) -> f64 {
        self.offsets.iter().map(|(_, w)| w.abs()).sum()
    }
}

/// `(∇H⋆u)(x) = Σ_j ∇H(x - x_j) u_j h^d` at an arbitrary point.
pub fn velocity_at(pot: &AdhesionPotential, support: &[(Point, f64)], x: &Point) -> Point {
    let mut v = ORIGIN;
    for (y, m) in support {
        let g = pot.grad(&crate::geometry::sub(x, y));
        v[0] += g[0] * m;
        v[1] += g[1] * m;
        v[2] += g[2] * m;
    }
    v
}

/// Cell centres and masses of the nonzero cells of `u`.
pub fn support_masses(u: &GridField) -> Vec<(Point, f64)> {
    let vol = u.grid.cell_volume();
    u.values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(i, v)| (u.grid.center(i), v * vol))
        .collect()
}

/// Adhesion velocity `∇H⋆u` at every cell centre.
pub fn adhesion_velocity(pot: &AdhesionPotential, u: &GridField) -> VectorField {
    let support = support_masses(u);
    let grid = &u.grid;
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            if support.is_empty() || !grid.is_active(i) {
                ORIGIN
            } else {
                velocity_at(pot, &support, &grid.center(i))
            }
        })
        .collect()
}

/// `ΔH⋆u` at every cell centre, from the lattice stencil.
pub fn adhesion_divergence(stencil: &LaplacianStencil, u: &GridField) -> Vec<f64> {
    let grid = &u.grid;
    let mut out = vec![0.0; grid.len()];
    for (j, &uj) in u.values.iter().enumerate() {
        if uj == 0.0 {
            continue;
        }
        let mj = grid.multi(j);
        for (o, w) in &stencil.offsets {
            let target = [mj[0] + o[0], mj[1] + o[1], mj[2] + o[2]];
            if let Some(t) = grid.index(&target) {
                if grid.is_active(t) {
                    out[t] += w * uj;
                }
            }
        }
    }
    out
}
