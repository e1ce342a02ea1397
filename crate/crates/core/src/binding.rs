//! The binding operator `Y(μ, w) = ψ(G⁺((1-w)μ), G⁻(wμ))`, its derivative in
//! `w`, fixed-point solvers for `w = Y(μ, w)` on a ball, the point-mass
//! closed form and the well-posedness certificate.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{dist, norm, Point, ORIGIN};
use crate::kernels::{InteractionKernel, Sign};
use crate::measures::{DiscreteMeasure, Grid};
use crate::{Error, Result};

/// Lattice nodes `i h` inside the closed ball of radius `rho`.
#[derive(Debug)]
pub struct NodeSet {
    pub dim: usize,
    pub h: f64,
    pub rho: f64,
    pub points: Vec<Point>,
    keys: Vec<[i64; 3]>,
    lookup: HashMap<[i64; 3], usize>,
    forward: Vec<[usize; 3]>,
}

const NONE: usize = usize::MAX;

impl NodeSet {
    pub fn new(dim: usize, h: f64, rho: f64) -> Result<Arc<Self>> {
        if !(rho > 0.0) {
            return Err(Error::validation("binding.rho", "must be positive"));
        }
        if !(h > 0.0) {
            return Err(Error::validation("solver.h", "must be positive"));
        }
        let n = (rho / h + 1e-9).floor() as i64;
        let span = |k: usize| if k < dim { n } else { 0 };
        let mut keys = Vec::new();
        for i2 in -span(2)..=span(2) {
            for i1 in -span(1)..=span(1) {
                for i0 in -span(0)..=span(0) {
                    let key = [i0, i1, i2];
                    let p = [i0 as f64 * h, i1 as f64 * h, i2 as f64 * h];
                    if norm(&p) <= rho * (1.0 + 1e-12) {
                        keys.push(key);
                    }
                }
            }
        }
        let lookup: HashMap<[i64; 3], usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let forward = keys
            .iter()
            .map(|k| {
                let mut f = [NONE; 3];
                for (axis, slot) in f.iter_mut().enumerate().take(dim) {
                    let mut kk = *k;
                    kk[axis] += 1;
                    if let Some(&j) = lookup.get(&kk) {
                        *slot = j;
                    }
                }
                f
            })
            .collect();
        let points = keys
            .iter()
            .map(|k| [k[0] as f64 * h, k[1] as f64 * h, k[2] as f64 * h])
            .collect();
        Ok(Arc::new(NodeSet {
            dim,
            h,
            rho,
            points,
            keys,
            lookup,
            forward,
        }))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn key(&self, i: usize) -> [i64; 3] {
        self.keys[i]
    }

    pub fn node_of(&self, x: &Point) -> Option<usize> {
        let key = [
            (x[0] / self.h).round() as i64,
            (x[1] / self.h).round() as i64,
            (x[2] / self.h).round() as i64,
        ];
        let i = *self.lookup.get(&key)?;
        (dist(&self.points[i], x) <= self.h / 100.0).then_some(i)
    }

    pub fn origin(&self) -> Option<usize> {
        self.lookup.get(&[0, 0, 0]).copied()
    }

    /// Node nearest to the radial projection of `x` onto the closed ball.
    pub fn nearest_projected(&self, x: &Point) -> usize {
        let r = norm(x);
        let p = if r > self.rho {
            let s = self.rho / r;
            [x[0] * s, x[1] * s, x[2] * s]
        } else {
            *x
        };
        let base = [
            (p[0] / self.h).round() as i64,
            (p[1] / self.h).round() as i64,
            (p[2] / self.h).round() as i64,
        ];
        let span = |k: usize| if k < self.dim { 1 } else { 0 };
        let mut best = (f64::INFINITY, NONE);
        for d0 in -span(0)..=span(0) {
            for d1 in -span(1)..=span(1) {
                for d2 in -span(2)..=span(2) {
                    let key = [base[0] + d0, base[1] + d1, base[2] + d2];
                    if let Some(&j) = self.lookup.get(&key) {
                        let dd = dist(&self.points[j], &p);
                        if dd < best.0 {
                            best = (dd, j);
                        }
                    }
                }
            }
        }
        if best.1 == NONE {
            (0..self.len())
                .min_by(|&a, &b| dist(&self.points[a], &p).partial_cmp(&dist(&self.points[b], &p)).unwrap())
                .unwrap()
        } else {
            best.1
        }
    }

    /// Largest forward-difference quotient along the coordinate axes.
    pub fn grad_sup(&self, v: &[f64]) -> f64 {
        let mut g = 0.0f64;
        for (i, f) in self.forward.iter().enumerate() {
            for &j in f.iter().take(self.dim) {
                if j != NONE {
                    g = g.max((v[j] - v[i]).abs() / self.h);
                }
            }
        }
        g
    }

    /// Discrete `W^{1,∞}` norm: `max(sup |v|, grad_sup(v))`.
    pub fn w_norm(&self, v: &[f64]) -> f64 {
        let s = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        s.max(self.grad_sup(v))
    }

    /// Operator norm `W^{1,∞} ← L^∞` bound of a matrix acting on node values:
    /// `max(‖A‖_∞, ‖D A‖_∞)` with `D` the forward-difference rows.
    pub fn matrix_w_norm(&self, a: &DMatrix<f64>) -> f64 {
        let rows = a.nrows();
        let cols = a.ncols();
        let row_sum = |i: usize| (0..cols).map(|c| a[(i, c)].abs()).sum::<f64>();
        let mut best = (0..rows).map(row_sum).fold(0.0, f64::max);
        for (i, f) in self.forward.iter().enumerate() {
            for &j in f.iter().take(self.dim) {
                if j != NONE {
                    let s: f64 = (0..cols).map(|c| (a[(j, c)] - a[(i, c)]).abs()).sum::<f64>() / self.h;
                    best = best.max(s);
                }
            }
        }
        best
    }
}

/// Bound-receptor fraction sampled on a [`NodeSet`].
#[derive(Clone, Debug)]
pub struct BindingField {
    pub nodes: Arc<NodeSet>,
    pub values: Vec<f64>,
}

impl BindingField {
    pub fn constant(nodes: Arc<NodeSet>, c: f64) -> Self {
        let values = vec![c; nodes.len()];
        BindingField { nodes, values }
    }

    pub fn from_fn(nodes: Arc<NodeSet>, f: impl Fn(&Point) -> f64) -> Self {
        let values = nodes.points.iter().map(f).collect();
        BindingField { nodes, values }
    }

    pub fn grad_sup(&self) -> f64 {
        self.nodes.grad_sup(&self.values)
    }

    pub fn w_norm(&self) -> f64 {
        self.nodes.w_norm(&self.values)
    }

    pub fn distance(&self, other: &BindingField) -> f64 {
        let d: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        self.nodes.w_norm(&d)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn at(&self, x: &Point) -> Option<f64> {
        self.nodes.node_of(x).map(|i| self.values[i])
    }
}

/// `ψ(a, b) = a / (a + b)` with `ψ(0, 0) = 1`.
pub fn psi(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        1.0
    } else {
        a / (a + b)
    }
}

/// Full node-to-node kernel matrices, reusable across measures at a fixed time.
pub struct KernelCache {
    pub t: f64,
    pub gp: DMatrix<f64>,
    pub gm: DMatrix<f64>,
}

/// Kernel and node set shared by all binding solves of a run.
pub struct BindingContext {
    pub kernel: InteractionKernel,
    pub nodes: Arc<NodeSet>,
    cache: OnceLock<Option<KernelCache>>,
}

const CACHE_LIMIT: usize = 4096;

impl BindingContext {
    pub fn new(kernel: InteractionKernel, nodes: Arc<NodeSet>) -> Result<Self> {
        if 2.0 * nodes.rho > kernel.s_cap * (1.0 + 1e-12) {
            return Err(Error::domain(
                "BindingContext",
                format!("node diameter {} exceeds the kernel cap {}", 2.0 * nodes.rho, kernel.s_cap),
            ));
        }
        Ok(BindingContext {
            kernel,
            nodes,
            cache: OnceLock::new(),
        })
    }

    fn cache(&self) -> Result<Option<&KernelCache>> {
        if !self.kernel.is_time_independent() || self.nodes.len() > CACHE_LIMIT {
            return Ok(None);
        }
        if self.cache.get().is_none() {
            let pts = &self.nodes.points;
            let gp = self.kernel.g_matrix(Sign::Plus, 0.0, pts)?;
            let gm = self.kernel.g_matrix(Sign::Minus, 0.0, pts)?;
            let _ = self.cache.set(Some(KernelCache { t: 0.0, gp, gm }));
        }
        Ok(self.cache.get().and_then(|c| c.as_ref()))
    }

    /// Kernel columns `G±(·, x_j)` for the listed nodes.
    pub fn columns(&self, t: f64, cols: &[usize]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if let Some(c) = self.cache()? {
            let n = self.nodes.len();
            let pick = |m: &DMatrix<f64>| {
                let mut out = DMatrix::zeros(n, cols.len());
                for (k, &j) in cols.iter().enumerate() {
                    out.column_mut(k).copy_from(&m.column(j));
                }
                out
            };
            return Ok((pick(&c.gp), pick(&c.gm)));
        }
        let pts: Vec<Point> = cols.iter().map(|&j| self.nodes.points[j]).collect();
        let gp = self.kernel.g_matrix_rect(Sign::Plus, t, &self.nodes.points, &pts)?;
        let gm = self.kernel.g_matrix_rect(Sign::Minus, t, &self.nodes.points, &pts)?;
        Ok((gp, gm))
    }

    pub fn problem(&self, mu: &DiscreteMeasure, t: f64) -> Result<BindingProblem> {
        let (atom_nodes, weights) = map_atoms(&self.nodes, mu)?;
        let (gp, gm) = self.columns(t, &atom_nodes)?;
        let mass = weights.iter().sum();
        Ok(BindingProblem {
            nodes: self.nodes.clone(),
            t,
            atom_nodes,
            weights,
            gp,
            gm,
            mass,
        })
    }
}

fn map_atoms(nodes: &NodeSet, mu: &DiscreteMeasure) -> Result<(Vec<usize>, Vec<f64>)> {
    let merged = mu.merged();
    let mut acc: Vec<(usize, f64)> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for a in &merged.atoms {
        if a.weight < 0.0 {
            return Err(Error::domain("apply_Y", "measure must be nonnegative"));
        }
        if norm(&a.pos) > nodes.rho * (1.0 + 1e-9) + nodes.h / 100.0 {
            return Err(Error::domain(
                "apply_Y",
                format!("atom at |x| = {} outside the ball of radius {}", norm(&a.pos), nodes.rho),
            ));
        }
        let j = nodes.node_of(&a.pos).ok_or_else(|| {
            Error::domain("apply_Y", format!("atom at {:?} is not on the node lattice", &a.pos[..nodes.dim]))
        })?;
        match slot.get(&j) {
            Some(&k) => acc[k].1 += a.weight,
            None => {
                slot.insert(j, acc.len());
                acc.push((j, a.weight));
            }
        }
    }
    let total: f64 = acc.iter().map(|x| x.1).sum();
    if !(total > 0.0) {
        return Err(Error::EmptyMeasure);
    }
    Ok(acc.into_iter().unzip())
}

/// `Y(μ, ·)` for one measure at one time, with kernel columns at the atoms.
#[derive(Clone, Debug)]
pub struct BindingProblem {
    pub nodes: Arc<NodeSet>,
    pub t: f64,
    pub atom_nodes: Vec<usize>,
    pub weights: Vec<f64>,
    gp: DMatrix<f64>,
    gm: DMatrix<f64>,
    pub mass: f64,
}

impl BindingProblem {
    pub fn new(kernel: &InteractionKernel, nodes: &Arc<NodeSet>, mu: &DiscreteMeasure, t: f64) -> Result<Self> {
        let (atom_nodes, weights) = map_atoms(nodes, mu)?;
        let pts: Vec<Point> = atom_nodes.iter().map(|&j| nodes.points[j]).collect();
        let gp = kernel.g_matrix_rect(Sign::Plus, t, &nodes.points, &pts)?;
        let gm = kernel.g_matrix_rect(Sign::Minus, t, &nodes.points, &pts)?;
        let mass = weights.iter().sum();
        Ok(BindingProblem {
            nodes: nodes.clone(),
            t,
            atom_nodes,
            weights,
            gp,
            gm,
            mass,
        })
    }

    /// `(G⁺((1-w)μ), G⁻(wμ))` at every node.
    pub fn ab(&self, w: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let k = self.atom_nodes.len();
        let mut cp = DVector::zeros(k);
        let mut cm = DVector::zeros(k);
        for (c, (&j, &m)) in self.atom_nodes.iter().zip(&self.weights).enumerate() {
            cp[c] = (1.0 - w[j]) * m;
            cm[c] = w[j] * m;
        }
        (&self.gp * cp, &self.gm * cm)
    }

    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        let (a, b) = self.ab(w);
        a.iter().zip(b.iter()).map(|(&a, &b)| psi(a, b)).collect()
    }

    pub fn residual(&self, w: &[f64]) -> f64 {
        let y = self.apply(w);
        let d: Vec<f64> = w.iter().zip(&y).map(|(a, b)| a - b).collect();
        self.nodes.w_norm(&d)
    }

    /// Columns of `∂_w Y` belonging to the atoms; all other columns vanish.
    pub fn jacobian_compact(&self, w: &[f64]) -> DMatrix<f64> {
        let (a, b) = self.ab(w);
        let n = self.nodes.len();
        let k = self.atom_nodes.len();
        let mut j = DMatrix::zeros(n, k);
        for c in 0..k {
            let m = self.weights[c];
            for i in 0..n {
                let s = a[i] + b[i];
                j[(i, c)] = -(b[i] * self.gp[(i, c)] + a[i] * self.gm[(i, c)]) * m / (s * s);
            }
        }
        j
    }

    pub fn jacobian(&self, w: &[f64]) -> DMatrix<f64> {
        let jc = self.jacobian_compact(w);
        let n = self.nodes.len();
        let mut full = DMatrix::zeros(n, n);
        for (c, &node) in self.atom_nodes.iter().enumerate() {
            full.column_mut(node).copy_from(&jc.column(c));
        }
        full
    }
}

pub fn apply_y(kernel: &InteractionKernel, mu: &DiscreteMeasure, w: &BindingField, t: f64) -> Result<BindingField> {
    let p = BindingProblem::new(kernel, &w.nodes, mu, t)?;
    Ok(BindingField {
        nodes: w.nodes.clone(),
        values: p.apply(&w.values),
    })
}

pub fn dy_dw_matrix(kernel: &InteractionKernel, mu: &DiscreteMeasure, w: &BindingField, t: f64) -> Result<DMatrix<f64>> {
    let p = BindingProblem::new(kernel, &w.nodes, mu, t)?;
    Ok(p.jacobian(&w.values))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Fraction of the new iterate kept at each step.
    pub relaxation: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            tol: 1e-10,
            max_iter: 500,
            relaxation: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub field: BindingField,
    /// Number of applications of `Y`, including the final convergence check.
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
    /// Largest ratio of successive update norms.
    pub contraction: f64,
}

const RATIO_FLOOR: f64 = 1e-12;

fn contraction_of(steps: &[f64]) -> f64 {
    steps
        .windows(2)
        .filter(|w| w[0] > RATIO_FLOOR)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max)
}

/// Relaxed Picard iteration `w <- (1-θ) w + θ Y(μ, w)`.
pub fn solve_binding_picard(problem: &BindingProblem, w_init: &BindingField, opts: &PicardOptions) -> Result<SolveOutcome> {
    let theta = opts.relaxation;
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::validation("binding.relaxation", "must lie in (0, 1]"));
    }
    let nodes = &problem.nodes;
    let mut w = w_init.values.clone();
    let mut history = Vec::new();
    let mut steps = Vec::new();
    for it in 1..=opts.max_iter {
        let y = problem.apply(&w);
        let d: Vec<f64> = y.iter().zip(&w).map(|(a, b)| a - b).collect();
        let r = nodes.w_norm(&d);
        history.push(r);
        if r <= opts.tol {
            return Ok(SolveOutcome {
                field: BindingField {
                    nodes: nodes.clone(),
                    values: w,
                },
                iterations: it,
                residual: r,
                contraction: contraction_of(&steps),
                history,
            });
        }
        steps.push(theta * r);
        for (wi, di) in w.iter_mut().zip(&d) {
            *wi += theta * di;
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual: *history.last().unwrap_or(&f64::NAN),
        history,
        last: w,
    })
}

/// Approximate inverse of `X = I - ∂_w Y(μ0, w0)`.
#[derive(Clone, Debug)]
pub enum Preconditioner {
    /// `X⁻¹ g = g + M g_A` with `M = J_A (I - J_AA)⁻¹`, `A` the anchor atoms.
    LowRank {
        nodes: Arc<NodeSet>,
        anchor_nodes: Vec<usize>,
        m: DMatrix<f64>,
        cond: f64,
    },
    Dense(DMatrix<f64>),
}

const COND_LIMIT: f64 = 1e12;

impl Preconditioner {
    pub fn new(problem: &BindingProblem, w0: &[f64]) -> Result<Self> {
        let ja = problem.jacobian_compact(w0);
        let k = problem.atom_nodes.len();
        let mut s = DMatrix::identity(k, k);
        for (r, &node) in problem.atom_nodes.iter().enumerate() {
            for c in 0..k {
                s[(r, c)] -= ja[(node, c)];
            }
        }
        let sv = s.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if cond > COND_LIMIT {
            return Err(Error::SingularX { cond });
        }
        let sinv = s
            .try_inverse()
            .ok_or_else(|| Error::SingularPreconditioner("I - J_AA is not invertible".into()))?;
        Ok(Preconditioner::LowRank {
            nodes: problem.nodes.clone(),
            anchor_nodes: problem.atom_nodes.clone(),
            m: ja * sinv,
            cond,
        })
    }

    pub fn from_matrix(xinv: DMatrix<f64>) -> Result<Self> {
        if !xinv.is_square() || xinv.iter().any(|x| !x.is_finite()) {
            return Err(Error::SingularPreconditioner("matrix must be square and finite".into()));
        }
        Ok(Preconditioner::Dense(xinv))
    }

    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        match self {
            Preconditioner::LowRank { anchor_nodes, m, .. } => {
                let ga = DVector::from_iterator(anchor_nodes.len(), anchor_nodes.iter().map(|&j| g[j]));
                let corr = m * ga;
                g.iter().zip(corr.iter()).map(|(a, b)| a + b).collect()
            }
            Preconditioner::Dense(x) => (x * DVector::from_column_slice(g)).as_slice().to_vec(),
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            Preconditioner::LowRank {
                nodes, anchor_nodes, m, ..
            } => {
                let n = nodes.len();
                let mut x = DMatrix::identity(n, n);
                for (c, &j) in anchor_nodes.iter().enumerate() {
                    for i in 0..n {
                        x[(i, j)] += m[(i, c)];
                    }
                }
                x
            }
            Preconditioner::Dense(x) => x.clone(),
        }
    }

    pub fn condition(&self) -> f64 {
        match self {
            Preconditioner::LowRank { cond, .. } => *cond,
            Preconditioner::Dense(_) => f64::NAN,
        }
    }

    /// Upper bound `1 + max(‖M‖_∞, ‖DM‖_∞)` on the `W^{1,∞}` operator norm.
    pub fn norm_upper(&self, nodes: &NodeSet) -> f64 {
        match self {
            Preconditioner::LowRank { m, .. } => 1.0 + nodes.matrix_w_norm(m),
            Preconditioner::Dense(x) => {
                let n = x.nrows();
                nodes.matrix_w_norm(&(x - DMatrix::identity(n, n))) + 1.0
            }
        }
    }
}

/// Preconditioned iteration `w <- w - X⁻¹ (w - Y(μ, w))`.
pub fn solve_binding_preconditioned(
    problem: &BindingProblem,
    w_start: &BindingField,
    xinv: &Preconditioner,
    tol: f64,
    max_iter: usize,
) -> Result<SolveOutcome> {
    let nodes = &problem.nodes;
    let mut w = w_start.values.clone();
    let mut history = Vec::new();
    let mut steps = Vec::new();
    for it in 1..=max_iter {
        let y = problem.apply(&w);
        let g: Vec<f64> = w.iter().zip(&y).map(|(a, b)| a - b).collect();
        let r = nodes.w_norm(&g);
        history.push(r);
        if r <= tol {
            return Ok(SolveOutcome {
                field: BindingField {
                    nodes: nodes.clone(),
                    values: w,
                },
                iterations: it,
                residual: r,
                contraction: contraction_of(&steps),
                history,
            });
        }
        let dw = xinv.apply(&g);
        steps.push(nodes.w_norm(&dw));
        for (wi, d) in w.iter_mut().zip(&dw) {
            *wi -= d;
        }
        if w.iter().any(|x| !x.is_finite()) {
            break;
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: *history.last().unwrap_or(&f64::NAN),
        history,
        last: w,
    })
}

/// Closed-form solution for `μ0 = m δ0`.
#[derive(Clone, Debug)]
pub struct PointMassSolution {
    pub m: f64,
    pub t: f64,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    kernel: InteractionKernel,
}

pub fn point_mass_solution(kernel: &InteractionKernel, m: f64, t: f64) -> Result<PointMassSolution> {
    if !(m > 0.0) {
        return Err(Error::validation("mass", "point mass must be positive"));
    }
    let gamma_plus = kernel.g(Sign::Plus, t, &ORIGIN, &ORIGIN)?;
    let gamma_minus = kernel.g(Sign::Minus, t, &ORIGIN, &ORIGIN)?;
    Ok(PointMassSolution {
        m,
        t,
        gamma_plus,
        gamma_minus,
        kernel: kernel.clone(),
    })
}

impl PointMassSolution {
    pub fn w0(&self) -> f64 {
        let (sp, sm) = (self.gamma_plus.sqrt(), self.gamma_minus.sqrt());
        sp / (sp + sm)
    }

    pub fn w_at(&self, x: &Point) -> Result<f64> {
        let gp = self.kernel.g(Sign::Plus, self.t, x, &ORIGIN)?;
        let gm = self.kernel.g(Sign::Minus, self.t, x, &ORIGIN)?;
        let a = self.gamma_minus.sqrt() * gp;
        let b = self.gamma_plus.sqrt() * gm;
        Ok(a / (a + b))
    }

    /// Kernel `ξ` of the derivative, `∂_w Y(mδ0, w0) h = ξ h(0)`.
    pub fn xi_at(&self, x: &Point) -> Result<f64> {
        let gp = self.kernel.g(Sign::Plus, self.t, x, &ORIGIN)?;
        let gm = self.kernel.g(Sign::Minus, self.t, x, &ORIGIN)?;
        let w0 = self.w0();
        let s = (1.0 - w0) * gp + w0 * gm;
        Ok(-gp * gm / (s * s))
    }

    pub fn profile(&self, nodes: &Arc<NodeSet>) -> Result<BindingField> {
        let values = nodes.points.iter().map(|x| self.w_at(x)).collect::<Result<_>>()?;
        Ok(BindingField {
            nodes: nodes.clone(),
            values,
        })
    }

    pub fn measure(&self, dim: usize) -> DiscreteMeasure {
        DiscreteMeasure::dirac(dim, ORIGIN, self.m)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Certificate {
    pub r1: f64,
    pub r2: f64,
    pub lip_mu: f64,
    pub c6: f64,
    pub xinv_norm: f64,
    pub xinv_norm_lower: f64,
    pub c_kernel: f64,
    pub ratio_first: f64,
    pub ratio_second: f64,
    pub ratio_mu: f64,
    pub c_w0: f64,
    pub w0_min: f64,
    pub w0_max: f64,
    pub w0_grad: f64,
    pub w0_norm: f64,
    pub mu0_mass: f64,
    pub condition: f64,
    pub t: f64,
    pub h: f64,
    pub rho: f64,
    pub nodes: usize,
    pub samples: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CertificateOptions {
    pub samples: usize,
    pub seed: u64,
    pub safety: f64,
}

impl Default for CertificateOptions {
    fn default() -> Self {
        CertificateOptions {
            samples: 24,
            seed: 0,
            safety: 1.5,
        }
    }
}

fn probe_directions(nodes: &NodeSet, rng: &mut ChaCha8Rng, count: usize) -> Vec<Vec<f64>> {
    let n = nodes.len();
    let mut dirs = vec![vec![1.0; n]];
    for k in 0..nodes.dim {
        dirs.push(nodes.points.iter().map(|p| p[k] / nodes.rho).collect());
    }
    for _ in 0..count {
        let smooth: bool = rng.gen_bool(0.5);
        if smooth {
            let c: Vec<f64> = (0..nodes.dim).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let phase: f64 = rng.gen_range(0.0..6.3);
            dirs.push(
                nodes
                    .points
                    .iter()
                    .map(|p| ((0..nodes.dim).map(|k| c[k] * p[k]).sum::<f64>() + phase).cos())
                    .collect(),
            );
        } else {
            dirs.push((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
    }
    dirs
}

/// Radii and Lipschitz constant of the validated solution regime around
/// `(μ0, w0)`, together with the preconditioner built at the anchor.
pub fn certificate(
    ctx: &BindingContext,
    mu0: &DiscreteMeasure,
    w0: &BindingField,
    t: f64,
    opts: &CertificateOptions,
) -> Result<(Certificate, Preconditioner)> {
    let nodes = &ctx.nodes;
    let problem = ctx.problem(mu0, t)?;
    let res = problem.residual(&w0.values);
    if res > 1e-10 {
        return Err(Error::domain(
            "certificate",
            format!("anchor residual {res:.3e} exceeds 1e-10"),
        ));
    }
    let pre = Preconditioner::new(&problem, &w0.values)?;
    let xinv_norm = pre.norm_upper(nodes);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let dirs = probe_directions(nodes, &mut rng, opts.samples);

    let mut xinv_lower = 1.0f64;
    for d in &dirs {
        let mut g = d.clone();
        for _ in 0..5 {
            let ng = nodes.w_norm(&g);
            if ng == 0.0 {
                break;
            }
            let xg = pre.apply(&g);
            xinv_lower = xinv_lower.max(nodes.w_norm(&xg) / ng);
            let nx = nodes.w_norm(&xg);
            g = xg.iter().map(|v| v / nx).collect();
        }
    }

    let jc = problem.jacobian_compact(&w0.values);
    let ratio_first = nodes.matrix_w_norm(&jc);

    let eps = 1e-3 * 0.5 * w0.min().min(1.0 - w0.max());
    let y0 = problem.apply(&w0.values);
    let ratio_second = dirs
        .par_iter()
        .map(|d| {
            let nd = nodes.w_norm(d);
            if nd == 0.0 {
                return 0.0;
            }
            let wp: Vec<f64> = w0.values.iter().zip(d).map(|(w, h)| w + eps * h / nd).collect();
            let wm: Vec<f64> = w0.values.iter().zip(d).map(|(w, h)| w - eps * h / nd).collect();
            let yp = problem.apply(&wp);
            let ym = problem.apply(&wm);
            let dd: Vec<f64> = (0..yp.len()).map(|i| (yp[i] - 2.0 * y0[i] + ym[i]) / (eps * eps)).collect();
            nodes.w_norm(&dd)
        })
        .reduce(|| 0.0, f64::max);

    let n = nodes.len();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for _ in 0..opts.samples.max(4) {
        let y = rng.gen_range(0..n);
        let z = rng.gen_range(0..n);
        if y != z {
            pairs.push((y, z));
        }
    }
    if let Some(o) = nodes.origin() {
        for k in 0..nodes.dim {
            let mut key = nodes.key(o);
            key[k] += 1;
            if let Some(&j) = nodes.lookup.get(&key) {
                pairs.push((o, j));
            }
        }
    }
    let (a, b) = problem.ab(&w0.values);
    let mut cols: Vec<usize> = pairs.iter().flat_map(|p| [p.0, p.1]).collect();
    cols.sort_unstable();
    cols.dedup();
    let col_of: HashMap<usize, usize> = cols.iter().enumerate().map(|(k, &j)| (j, k)).collect();
    let (gp, gm) = ctx.columns(t, &cols)?;
    let ratio_mu = pairs
        .iter()
        .map(|&(y, z)| {
            let (cy, cz) = (col_of[&y], col_of[&z]);
            let (wy, wz) = (w0.values[y], w0.values[z]);
            let dy: Vec<f64> = (0..n)
                .map(|i| {
                    let da = gp[(i, cy)] * (1.0 - wy) - gp[(i, cz)] * (1.0 - wz);
                    let db = gm[(i, cy)] * wy - gm[(i, cz)] * wz;
                    let s = a[i] + b[i];
                    (b[i] * da - a[i] * db) / (s * s)
                })
                .collect();
            nodes.w_norm(&dy) / dist(&nodes.points[y], &nodes.points[z])
        })
        .fold(0.0, f64::max);

    let mass = problem.mass;
    let c_kernel = opts.safety * ratio_first.max(ratio_second).max(ratio_mu * mass);
    let c6 = xinv_norm * c_kernel;
    let (w_min, w_max) = (w0.min(), w0.max());
    let c_w0 = 0.5 * w_min.min(1.0 - w_max);
    let r1 = (1.0 / (1.0 + 2.0 * c6)).min(c_w0);
    let grad = w0.grad_sup();
    let r2 = 0.5 / c6 * r1 * mass / (1.0 + grad);
    let lip_mu = 2.0 * c6 / mass * (1.0 + grad + r1);
    debug!("certificate: xinv {xinv_norm:.4} c_kernel {c_kernel:.4} r1 {r1:.4e} r2 {r2:.4e}");
    Ok((
        Certificate {
            r1,
            r2,
            lip_mu,
            c6,
            xinv_norm,
            xinv_norm_lower: xinv_lower,
            c_kernel,
            ratio_first,
            ratio_second,
            ratio_mu,
            c_w0,
            w0_min: w_min,
            w0_max: w_max,
            w0_grad: grad,
            w0_norm: w0.w_norm(),
            mu0_mass: mass,
            condition: pre.condition(),
            t,
            h: nodes.h,
            rho: nodes.rho,
            nodes: n,
            samples: dirs.len() + pairs.len(),
        },
        pre,
    ))
}

/// `w̃(x) = w(nearest node to Π x)` at every cell of `grid`, where `Π` is the
/// radial projection onto the closed ball.
pub fn extend_w(w: &BindingField, grid: &Grid) -> Vec<f64> {
    (0..grid.len())
        .into_par_iter()
        .map(|i| w.values[w.nodes.nearest_projected(&grid.center(i))])
        .collect()
}

/// Largest forward-difference quotient of a cell field over active cells.
pub fn grid_grad_sup(grid: &Grid, v: &[f64]) -> f64 {
    let mut g = 0.0f64;
    for i in grid.active_cells() {
        for k in 0..grid.dim() {
            if let Some(j) = grid.neighbor(i, k, true) {
                if grid.is_active(j) {
                    g = g.max((v[j] - v[i]).abs() / grid.h());
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::point;
    use crate::kernels::Modulation;
    use crate::measures::{field_to_measure, kr_distance, Atom, GridField};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn symmetric_kernel(k: f64) -> InteractionKernel {
        let c = Modulation::Constant { value: k };
        InteractionKernel::new(1.0, 1.0, 2.0, 2.0, c.clone(), c, true, 0.8).unwrap()
    }

    fn gaussian_kernel() -> InteractionKernel {
        InteractionKernel::new(
            1.0,
            0.5,
            2.0,
            3.0,
            Modulation::Gaussian {
                base: 3.0,
                amplitude: 1.0,
                width: 0.2,
            },
            Modulation::Constant { value: 1.0 },
            false,
            0.8,
        )
        .unwrap()
    }

    fn spread_measure(nodes: &NodeSet, rng: &mut ChaCha8Rng, count: usize) -> DiscreteMeasure {
        let atoms = (0..count)
            .map(|_| Atom {
                pos: nodes.points[rng.gen_range(0..nodes.len())],
                weight: rng.gen_range(0.1..1.0),
            })
            .collect();
        DiscreteMeasure::new(nodes.dim, atoms, nodes.rho).unwrap()
    }

    fn random_field(nodes: &Arc<NodeSet>, rng: &mut ChaCha8Rng) -> BindingField {
        let values = (0..nodes.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        BindingField {
            nodes: nodes.clone(),
            values,
        }
    }

    #[test]
    fn psi_examples() {
        assert_eq!(psi(0.0, 0.0), 1.0);
        assert_eq!(psi(2.0, 2.0), 0.5);
        assert_eq!(psi(3.0, 0.0), 1.0);
    }

    #[test]
    fn apply_y_examples() {
        let nodes = NodeSet::new(1, 0.05, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu = spread_measure(&nodes, &mut rng, 5);
        let half = BindingField::constant(nodes.clone(), 0.5);
        let y = apply_y(&symmetric_kernel(2.0), &mu, &half, 0.0).unwrap();
        assert!(y.values.iter().all(|v| (v - 0.5).abs() < 1e-15));
        let zero = BindingField::constant(nodes.clone(), 0.0);
        let y = apply_y(&gaussian_kernel(), &mu, &zero, 0.0).unwrap();
        assert!(y.values.iter().all(|v| *v == 1.0));
        let empty = DiscreteMeasure::empty(1, 0.4);
        assert!(matches!(apply_y(&gaussian_kernel(), &empty, &half, 0.0), Err(Error::EmptyMeasure)));
        let far = DiscreteMeasure::dirac(1, point(&[0.45]), 1.0);
        assert!(matches!(apply_y(&gaussian_kernel(), &far, &half, 0.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn point_mass_values() {
        let k = InteractionKernel::simple(4.0, 1.0, 0.8).unwrap();
        let pm = point_mass_solution(&k, 1.0, 0.0).unwrap();
        assert_relative_eq!(pm.w0(), 2.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(pm.w_at(&ORIGIN).unwrap(), 2.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(pm.xi_at(&ORIGIN).unwrap(), -1.0, max_relative = 1e-14);
        let k = InteractionKernel::simple(2.5, 2.5, 0.8).unwrap();
        assert_eq!(point_mass_solution(&k, 3.0, 0.0).unwrap().w0(), 0.5);
    }

    #[test]
    fn point_mass_profile_is_fixed_point() {
        let k = gaussian_kernel();
        for m in [0.2, 1.0, 7.0] {
            let nodes = NodeSet::new(2, 0.05, 0.35).unwrap();
            let pm = point_mass_solution(&k, m, 0.0).unwrap();
            let w = pm.profile(&nodes).unwrap();
            let y = apply_y(&k, &pm.measure(2), &w, 0.0).unwrap();
            assert!(w.distance(&y) < 1e-13);
            assert!(w.min() > 0.0 && w.max() < 1.0);
        }
    }

    #[test]
    fn point_mass_jacobian_is_mass_free() {
        let k = gaussian_kernel();
        let nodes = NodeSet::new(1, 0.02, 0.3).unwrap();
        for m in [0.5, 1.0, 4.0] {
            let pm = point_mass_solution(&k, m, 0.0).unwrap();
            let w = pm.profile(&nodes).unwrap();
            let p = BindingProblem::new(&k, &nodes, &pm.measure(1), 0.0).unwrap();
            let jc = p.jacobian_compact(&w.values);
            for (i, x) in nodes.points.iter().enumerate() {
                assert_relative_eq!(jc[(i, 0)], pm.xi_at(x).unwrap(), max_relative = 1e-12);
            }
            let pre = Preconditioner::new(&p, &w.values).unwrap();
            let g: Vec<f64> = nodes.points.iter().map(|x| (3.0 * x[0]).sin() + 0.3).collect();
            let o = nodes.origin().unwrap();
            let got = pre.apply(&g);
            for (i, x) in nodes.points.iter().enumerate() {
                let expected = g[i] + 0.5 * pm.xi_at(x).unwrap() * g[o];
                assert!((got[i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let k = gaussian_kernel();
        let nodes = NodeSet::new(2, 0.1, 0.35).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = spread_measure(&nodes, &mut rng, 6);
        let w = BindingField::from_fn(nodes.clone(), |p| 0.4 + 0.3 * p[0] - 0.2 * p[1]);
        let p = BindingProblem::new(&k, &nodes, &mu, 0.0).unwrap();
        let j = p.jacobian(&w.values);
        let step = 1e-5;
        for c in 0..nodes.len() {
            let mut wp = w.values.clone();
            let mut wm = w.values.clone();
            wp[c] += step;
            wm[c] -= step;
            let yp = p.apply(&wp);
            let ym = p.apply(&wm);
            for r in 0..nodes.len() {
                let fd = (yp[r] - ym[r]) / (2.0 * step);
                assert!((fd - j[(r, c)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn jacobian_examples() {
        let k = symmetric_kernel(1.0);
        let nodes = NodeSet::new(1, 0.1, 0.3).unwrap();
        let mu = DiscreteMeasure::dirac(1, point(&[0.1]), 1.0);
        let half = BindingField::constant(nodes.clone(), 0.5);
        let j = dy_dw_matrix(&k, &mu, &half, 0.0).unwrap();
        assert_eq!(j.rank(1e-12), 1);
        let p = BindingProblem::new(&k, &nodes, &mu, 0.0).unwrap();
        let step = 1e-6;
        let wp: Vec<f64> = half.values.iter().map(|v| v + step).collect();
        let wm: Vec<f64> = half.values.iter().map(|v| v - step).collect();
        let (yp, ym) = (p.apply(&wp), p.apply(&wm));
        for r in 0..nodes.len() {
            let fd = (yp[r] - ym[r]) / (2.0 * step);
            assert!((j.row(r).sum() - fd).abs() < 1e-8);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mu = spread_measure(&nodes, &mut rng, 4);
        let j = dy_dw_matrix(&k, &mu, &half, 0.0).unwrap();
        let ones = DVector::from_element(nodes.len(), 1.0);
        let v = &j * ones;
        assert!(v.iter().all(|x| (x - v[0]).abs() < 1e-12));

        let kg = gaussian_kernel();
        let w = BindingField::from_fn(nodes.clone(), |p| 0.5 + p[0]);
        let j1 = dy_dw_matrix(&kg, &mu, &w, 0.0).unwrap();
        let j10 = dy_dw_matrix(&kg, &mu.scaled(10.0), &w, 0.0).unwrap();
        assert!((j1 - j10).abs().max() < 1e-10);
    }

    #[test]
    fn picard_symmetric() {
        let k = symmetric_kernel(1.0);
        let nodes = NodeSet::new(1, 0.05, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mu = spread_measure(&nodes, &mut rng, 6);
        let p = BindingProblem::new(&k, &nodes, &mu, 0.0).unwrap();
        let init = BindingField::constant(nodes.clone(), 0.3);
        let out = solve_binding_picard(&p, &init, &PicardOptions::default()).unwrap();
        assert!(out.iterations <= 40);
        assert!(out.residual < 1e-12);
        assert!(out.field.values.iter().all(|v| (v - 0.5).abs() < 1e-12));

        let exact = BindingField::constant(nodes.clone(), 0.5);
        let out = solve_binding_picard(&p, &exact, &PicardOptions::default()).unwrap();
        assert!(out.iterations <= 1);
    }

    #[test]
    fn picard_reaches_point_mass_profile() {
        let k = InteractionKernel::simple(4.0, 1.0, 0.8).unwrap();
        let h = 0.02;
        let nodes = NodeSet::new(1, h, 0.3).unwrap();
        let pm = point_mass_solution(&k, 2.0, 0.0).unwrap();
        let oracle = pm.profile(&nodes).unwrap();
        let p = BindingProblem::new(&k, &nodes, &pm.measure(1), 0.0).unwrap();
        let init = BindingField::constant(nodes.clone(), 0.2);
        let out = solve_binding_picard(&p, &init, &PicardOptions::default()).unwrap();
        assert!(out.field.distance(&oracle) < 1e-9);
    }

    #[test]
    fn plain_picard_stalls_without_relaxation() {
        let k = InteractionKernel::simple(4.0, 1.0, 0.8).unwrap();
        let nodes = NodeSet::new(1, 0.05, 0.3).unwrap();
        let pm = point_mass_solution(&k, 1.0, 0.0).unwrap();
        let p = BindingProblem::new(&k, &nodes, &pm.measure(1), 0.0).unwrap();
        let init = BindingField::constant(nodes.clone(), 0.2);
        let opts = PicardOptions {
            relaxation: 1.0,
            max_iter: 200,
            ..Default::default()
        };
        assert!(matches!(solve_binding_picard(&p, &init, &opts), Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn preconditioned_at_anchor() {
        let k = InteractionKernel::simple(4.0, 1.0, 0.8).unwrap();
        let nodes = NodeSet::new(1, 0.02, 0.3).unwrap();
        let pm = point_mass_solution(&k, 1.0, 0.0).unwrap();
        let w0 = pm.profile(&nodes).unwrap();
        let p = BindingProblem::new(&k, &nodes, &pm.measure(1), 0.0).unwrap();
        let pre = Preconditioner::new(&p, &w0.values).unwrap();
        let out = solve_binding_preconditioned(&p, &w0, &pre, 1e-10, 50).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.field.distance(&w0) < 1e-14);

        let dense = Preconditioner::from_matrix(pre.dense()).unwrap();
        let j = p.jacobian(&w0.values);
        let x = DMatrix::identity(nodes.len(), nodes.len()) - j;
        let should_be_id = x * pre.dense();
        assert!((should_be_id - DMatrix::identity(nodes.len(), nodes.len())).abs().max() < 1e-12);
        let g: Vec<f64> = (0..nodes.len()).map(|i| (i as f64).sin()).collect();
        let a = pre.apply(&g);
        let b = dense.apply(&g);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-13));
    }

    fn anchor_1d() -> (BindingContext, DiscreteMeasure, BindingField) {
        let k = gaussian_kernel();
        let h = 1.0 / 64.0;
        let nodes = NodeSet::new(1, h, 0.35).unwrap();
        let grid = Arc::new(Grid::new(1, h, 1.5).unwrap());
        let u = GridField::from_fn(grid, |x| (0.0081 - x[0] * x[0]).max(0.0) * 10.0);
        let mu0 = field_to_measure(&u);
        let ctx = BindingContext::new(k, nodes.clone()).unwrap();
        let p = ctx.problem(&mu0, 0.0).unwrap();
        let opts = PicardOptions {
            tol: 1e-13,
            ..Default::default()
        };
        let w0 = solve_binding_picard(&p, &BindingField::constant(nodes, 0.5), &opts)
            .unwrap()
            .field;
        (ctx, mu0, w0)
    }

    #[test]
    fn certificate_structure() {
        let (ctx, mu0, w0) = anchor_1d();
        let (c, pre) = certificate(&ctx, &mu0, &w0, 0.0, &CertificateOptions::default()).unwrap();
        assert!(c.r1 > 0.0 && c.r2 > 0.0 && c.lip_mu > 0.0);
        assert!(c.r1 <= 0.5 * w0.min().min(1.0 - w0.max()) + 1e-15);
        assert_relative_eq!(c.r1, (1.0 / (1.0 + 2.0 * c.c6)).min(c.c_w0), max_relative = 1e-15);
        assert_relative_eq!(
            c.r2,
            0.5 / c.c6 * c.r1 * c.mu0_mass / (1.0 + c.w0_grad),
            max_relative = 1e-15
        );
        assert!(c.xinv_norm_lower <= c.xinv_norm * (1.0 + 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let g = random_field(&ctx.nodes, &mut rng).values;
            let xg = pre.apply(&g);
            assert!(ctx.nodes.w_norm(&xg) <= c.xinv_norm * ctx.nodes.w_norm(&g) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn certificate_symmetric_cap() {
        let k = symmetric_kernel(1.0);
        let nodes = NodeSet::new(1, 0.05, 0.3).unwrap();
        let ctx = BindingContext::new(k, nodes.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mu = spread_measure(&nodes, &mut rng, 5);
        let w0 = BindingField::constant(nodes, 0.5);
        let (c, _) = certificate(&ctx, &mu, &w0, 0.0, &CertificateOptions::default()).unwrap();
        assert_eq!(c.c_w0, 0.25);
        assert_eq!(c.r1, (1.0 / (1.0 + 2.0 * c.c6)).min(0.25));
    }

    #[test]
    fn certificate_point_mass_inverse() {
        let k = InteractionKernel::simple(4.0, 1.0, 0.8).unwrap();
        let nodes = NodeSet::new(1, 0.02, 0.3).unwrap();
        let pm = point_mass_solution(&k, 1.0, 0.0).unwrap();
        let w0 = pm.profile(&nodes).unwrap();
        let ctx = BindingContext::new(k, nodes.clone()).unwrap();
        let (c, _) = certificate(&ctx, &pm.measure(1), &w0, 0.0, &CertificateOptions::default()).unwrap();
        assert!(c.r1 > 0.0 && c.r2 > 0.0);
        let o = nodes.origin().unwrap();
        let n = nodes.len();
        let mut analytic = DMatrix::identity(n, n);
        for (i, x) in nodes.points.iter().enumerate() {
            analytic[(i, o)] += 0.5 * pm.xi_at(x).unwrap();
        }
        let direct = 1.0 + nodes.matrix_w_norm(&(analytic - DMatrix::identity(n, n)));
        assert_relative_eq!(c.xinv_norm, direct, max_relative = 1e-12);
    }

    #[test]
    fn ball_lipschitz_of_solution_map() {
        let (ctx, mu0, w0) = anchor_1d();
        let (cert, pre) = certificate(&ctx, &mu0, &w0, 0.0, &CertificateOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let solve = |mu: &DiscreteMeasure| {
            let p = ctx.problem(mu, 0.0).unwrap();
            solve_binding_preconditioned(&p, &w0, &pre, 1e-13, 100).unwrap()
        };
        for _ in 0..6 {
            let perturb = |rng: &mut ChaCha8Rng| {
                let mut m = mu0.clone();
                for a in &mut m.atoms {
                    a.weight *= 1.0 + 0.02 * rng.gen_range(-1.0..1.0);
                }
                m.scaled(mu0.total_mass() / m.total_mass())
            };
            let m1 = perturb(&mut rng);
            let m2 = perturb(&mut rng);
            assert!(kr_distance(&m1, &mu0).unwrap() <= cert.r2);
            let s1 = solve(&m1);
            let s2 = solve(&m2);
            assert!(s1.contraction <= 0.5);
            let lhs = s1.field.distance(&s2.field);
            let rhs = cert.lip_mu * kr_distance(&m1, &m2).unwrap();
            assert!(lhs <= rhs, "{lhs} > {rhs}");
        }
    }

    #[test]
    fn extension_examples() {
        let nodes = NodeSet::new(1, 0.05, 0.3).unwrap();
        let grid = Grid::new(1, 0.05, 1.0).unwrap();
        let c = BindingField::constant(nodes.clone(), 0.7);
        assert!(extend_w(&c, &grid).iter().all(|v| *v == 0.7));
        let radial = BindingField::from_fn(nodes.clone(), |p| 0.2 + norm(p));
        let e = extend_w(&radial, &grid);
        for i in grid.active_cells() {
            let x = grid.center(i);
            if norm(&x) >= 0.3 {
                assert_relative_eq!(e[i], 0.5, max_relative = 1e-12);
            } else {
                assert_eq!(Some(e[i]), radial.at(&x));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn y_in_unit_interval_and_denominator_positive(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = gaussian_kernel();
            let nodes = NodeSet::new(2, 0.1, 0.35).unwrap();
            let mu = spread_measure(&nodes, &mut rng, 5);
            let w = random_field(&nodes, &mut rng);
            let p = BindingProblem::new(&k, &nodes, &mu, 0.0).unwrap();
            let (a, b) = p.ab(&w.values);
            let lower = crate::kernels::kernel_bounds(&k, 2, (0.0, 0.0), 0.35).unwrap().c_lower;
            for i in 0..nodes.len() {
                prop_assert!(a[i] + b[i] >= lower * p.mass * (1.0 - 1e-9));
            }
            let y = p.apply(&w.values);
            prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn converged_solutions_are_interior(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = gaussian_kernel();
            let nodes = NodeSet::new(1, 0.05, 0.4).unwrap();
            let mu = spread_measure(&nodes, &mut rng, 4);
            let p = BindingProblem::new(&k, &nodes, &mu, 0.0).unwrap();
            let init = random_field(&nodes, &mut rng);
            let out = solve_binding_picard(&p, &init, &PicardOptions::default()).unwrap();
            prop_assert!(out.field.min() > 0.0 && out.field.max() < 1.0);
        }

        #[test]
        fn psi_derivative_bounds(la in -3.0f64..3.0, lb in -3.0f64..3.0) {
            let (a, b) = (10f64.powf(la), 10f64.powf(lb));
            let da = b / ((a + b) * (a + b));
            let db = a / ((a + b) * (a + b));
            let step = 1e-5 * a;
            let fda = (psi(a + step, b) - psi(a - step, b)) / (2.0 * step);
            prop_assert!((fda - da).abs() <= 1e-4 / (a + b));
            prop_assert!(da <= 1.0 / (a + b) && db <= 1.0 / (a + b));
        }

        #[test]
        fn extension_does_not_steepen(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for dim in [1usize, 2] {
                let h = 0.05;
                let nodes = NodeSet::new(dim, h, 0.3).unwrap();
                let grid = Grid::new(dim, h, 0.8).unwrap();
                let w = random_field(&nodes, &mut rng);
                let e = extend_w(&w, &grid);
                prop_assert!(e.iter().all(|v| (0.0..=1.0).contains(v)));
                let factor = if dim == 1 { 1.0 } else { 2.0 };
                prop_assert!(grid_grad_sup(&grid, &e) <= factor * w.grad_sup() + 1e-12);
            }
        }
    }
}
