use std::collections::BTreeMap;

use log::warn;

use super::{Atom, DiscreteMeasure};
use crate::geometry::{dist, Point, ORIGIN};
use crate::{Error, Result};

/// Largest number of source-sink pairs handed to the exact solver.
pub const PAIR_CAP: usize = 5000 * 5000;

const MASS_RTOL: f64 = 1e-12;

/// Kantorovich-Rubinstein distance between two measures of equal total mass.
pub fn kr_distance(mu1: &DiscreteMeasure, mu2: &DiscreteMeasure) -> Result<f64> {
    let nu = balanced_difference(mu1, mu2)?;
    if nu.dim == 1 {
        Ok(cdf_distance(&nu))
    } else {
        lp_norm(&nu)
    }
}

/// Same as [`kr_distance`] but always solves the transportation problem.
pub fn kr_distance_lp(mu1: &DiscreteMeasure, mu2: &DiscreteMeasure) -> Result<f64> {
    let nu = balanced_difference(mu1, mu2)?;
    lp_norm(&nu)
}

/// KR norm of a signed measure with zero total mass.
pub fn kr_norm(nu: &DiscreteMeasure) -> Result<f64> {
    let m = nu.merged();
    let scale = m.atoms.iter().map(|a| a.weight.abs()).sum::<f64>();
    let mass = m.total_mass();
    if mass.abs() > MASS_RTOL * scale {
        return Err(Error::MassMismatch {
            lhs: mass,
            rhs: 0.0,
        });
    }
    if m.dim == 1 {
        Ok(cdf_distance(&m))
    } else {
        lp_norm(&m)
    }
}

fn balanced_difference(mu1: &DiscreteMeasure, mu2: &DiscreteMeasure) -> Result<DiscreteMeasure> {
    if mu1.dim != mu2.dim {
        return Err(Error::domain("kr_distance", "dimension mismatch"));
    }
    let m1 = mu1.total_mass();
    let m2 = mu2.total_mass();
    let scale = mu1.total_variation().max(mu2.total_variation());
    if (m1 - m2).abs() > MASS_RTOL * scale {
        return Err(Error::MassMismatch { lhs: m1, rhs: m2 });
    }
    Ok(mu1.difference(mu2).merged())
}

fn cdf_distance(nu: &DiscreteMeasure) -> f64 {
    let table = nu.cdf_table();
    table
        .windows(2)
        .map(|w| w[0].1.abs() * (w[1].0 - w[0].0))
        .sum()
}

fn lp_norm(nu: &DiscreteMeasure) -> Result<f64> {
    let (mut pos, mut neg) = nu.jordan();
    if pos.len() * neg.len() > PAIR_CAP {
        let mut spacing = typical_spacing(&pos, &neg, nu.dim);
        while pos.len() * neg.len() > PAIR_CAP {
            spacing *= 2.0;
            pos = coarsen(&pos, spacing);
            neg = coarsen(&neg, spacing);
        }
        warn!(
            "transport problem coarsened to {}x{} atoms at spacing {spacing:.3e}",
            pos.len(),
            neg.len()
        );
    }
    transport_cost(&pos, &neg)
}

fn typical_spacing(a: &[Atom], b: &[Atom], dim: usize) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for at in a.iter().chain(b) {
        for k in 0..dim {
            lo[k] = lo[k].min(at.pos[k]);
            hi[k] = hi[k].max(at.pos[k]);
        }
    }
    let mut vol = 1.0;
    let mut d_eff = 0;
    for k in 0..dim {
        let e = hi[k] - lo[k];
        if e > 0.0 {
            vol *= e;
            d_eff += 1;
        }
    }
    if d_eff == 0 {
        return 1e-12;
    }
    let n = (a.len() + b.len()) as f64;
    (vol / n).powf(1.0 / d_eff as f64)
}

/// Mass-conserving agglomeration onto a lattice of the given spacing; each
/// bin is replaced by one atom at its centre of mass.
pub fn coarsen(atoms: &[Atom], spacing: f64) -> Vec<Atom> {
    let mut bins: BTreeMap<[i64; 3], (f64, Point)> = BTreeMap::new();
    for a in atoms {
        let key = [
            (a.pos[0] / spacing).floor() as i64,
            (a.pos[1] / spacing).floor() as i64,
            (a.pos[2] / spacing).floor() as i64,
        ];
        let e = bins.entry(key).or_insert((0.0, ORIGIN));
        e.0 += a.weight;
        for k in 0..3 {
            e.1[k] += a.weight * a.pos[k];
        }
    }
    bins.into_values()
        .filter(|(w, _)| *w > 0.0)
        .map(|(w, s)| Atom {
            pos: [s[0] / w, s[1] / w, s[2] / w],
            weight: w,
        })
        .collect()
}

/// Optimal cost of moving `sources` onto `sinks` with Euclidean ground cost.
///
/// Transportation simplex: north-west corner start, potentials recomputed on
/// the spanning tree, block pricing and the usual cycle ratio test.
pub fn transport_cost(sources: &[Atom], sinks: &[Atom]) -> Result<f64> {
    let m = sources.len();
    let n = sinks.len();
    if m == 0 || n == 0 {
        return Ok(0.0);
    }
    if n == 1 {
        return Ok(sources
            .iter()
            .map(|s| s.weight * dist(&s.pos, &sinks[0].pos))
            .sum());
    }
    if m == 1 {
        return Ok(sinks
            .iter()
            .map(|s| s.weight * dist(&s.pos, &sources[0].pos))
            .sum());
    }
    let cost = |i: usize, j: usize| dist(&sources[i].pos, &sinks[j].pos);
    let nodes = m + n;

    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(nodes - 1);
    let mut flow: Vec<f64> = Vec::with_capacity(nodes - 1);
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    {
        let mut a: Vec<f64> = sources.iter().map(|s| s.weight).collect();
        let mut b: Vec<f64> = sinks.iter().map(|s| s.weight).collect();
        let (mut i, mut j) = (0, 0);
        loop {
            let q = a[i].min(b[j]).max(0.0);
            let id = edges.len();
            edges.push((i, j));
            flow.push(q);
            adj[i].push(id);
            adj[m + j].push(id);
            a[i] -= q;
            b[j] -= q;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if i == m - 1 {
                j += 1;
            } else if j == n - 1 || a[i] < b[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let scale = sources
        .iter()
        .flat_map(|s| sinks.iter().map(move |t| dist(&s.pos, &t.pos)))
        .take(4096)
        .fold(0.0, f64::max)
        .max(1e-300);
    let tol = 1e-12 * scale;
    let total = m * n;
    let block = ((total as f64).sqrt() as usize).max(64).min(total);
    let max_iter = 50 * nodes * ((nodes as f64).sqrt() as usize + 1) + 10_000;

    let mut pot = vec![0.0; nodes];
    let mut seen = vec![false; nodes];
    let mut parent = vec![usize::MAX; nodes];
    let mut stack = Vec::with_capacity(nodes);
    let mut cursor = 0usize;
    let mut iterations = 0usize;

    loop {
        seen.iter_mut().for_each(|s| *s = false);
        stack.clear();
        stack.push(0);
        seen[0] = true;
        pot[0] = 0.0;
        while let Some(v) = stack.pop() {
            for &e in &adj[v] {
                let (i, j) = edges[e];
                let (other, val) = if v == i {
                    (m + j, cost(i, j) - pot[i])
                } else {
                    (i, cost(i, j) - pot[m + j])
                };
                if !seen[other] {
                    seen[other] = true;
                    pot[other] = val;
                    stack.push(other);
                }
            }
        }

        let mut entering = None;
        let mut best = -tol;
        let mut scanned = 0usize;
        while scanned < total {
            let end = (scanned + block).min(total);
            for _ in scanned..end {
                let (i, j) = (cursor / n, cursor % n);
                let r = cost(i, j) - pot[i] - pot[m + j];
                if r < best {
                    best = r;
                    entering = Some((i, j));
                }
                cursor += 1;
                if cursor == total {
                    cursor = 0;
                }
            }
            scanned = end;
            if entering.is_some() {
                break;
            }
        }
        let Some((ei, ej)) = entering else { break };

        iterations += 1;
        if iterations > max_iter {
            return Err(Error::NonConvergence {
                iterations,
                residual: best,
                history: Vec::new(),
                last: Vec::new(),
            });
        }

        // Tree path from the entering column back to the entering row.
        seen.iter_mut().for_each(|s| *s = false);
        stack.clear();
        let start = m + ej;
        stack.push(start);
        seen[start] = true;
        parent[start] = usize::MAX;
        while let Some(v) = stack.pop() {
            if v == ei {
                break;
            }
            for &e in &adj[v] {
                let (i, j) = edges[e];
                let other = if v == i { m + j } else { i };
                if !seen[other] {
                    seen[other] = true;
                    parent[other] = e;
                    stack.push(other);
                }
            }
        }
        let mut path = Vec::new();
        let mut v = ei;
        while v != start {
            let e = parent[v];
            path.push(e);
            let (i, j) = edges[e];
            v = if v == i { m + j } else { i };
        }
        path.reverse();

        let mut theta = f64::INFINITY;
        let mut leaving = usize::MAX;
        for (k, &e) in path.iter().enumerate() {
            if k % 2 == 0 && flow[e] < theta {
                theta = flow[e];
                leaving = e;
            }
        }
        for (k, &e) in path.iter().enumerate() {
            if k % 2 == 0 {
                flow[e] -= theta;
            } else {
                flow[e] += theta;
            }
        }
        let (li, lj) = edges[leaving];
        adj[li].retain(|&x| x != leaving);
        adj[m + lj].retain(|&x| x != leaving);
        edges[leaving] = (ei, ej);
        flow[leaving] = theta;
        adj[ei].push(leaving);
        adj[m + ej].push(leaving);
    }

    Ok(edges
        .iter()
        .zip(&flow)
        .map(|(&(i, j), f)| f.max(0.0) * cost(i, j))
        .sum())
}
