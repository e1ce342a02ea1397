//! Grids, densities on grids, finite signed atomic measures and the
//! Kantorovich-Rubinstein distance between them.

mod transport;

use std::sync::Arc;

use serde_json::{json, Value};

use crate::geometry::{norm, point, Point, ORIGIN};
use crate::{Error, Result};

pub use transport::{coarsen, kr_distance, kr_distance_lp, kr_norm, transport_cost, PAIR_CAP};

/// Uniform Cartesian lattice with a cell centred at the origin.
///
/// Cell centres sit at `i * h` for every multi-index with `|i_k| <= n`.
/// Cells whose centre lies in the closed ball of radius `radius` are active;
/// the remaining cells act as zero ghost values.
#[derive(Clone, Debug)]
pub struct Grid {
    dim: usize,
    h: f64,
    n: i64,
    side: usize,
    radius: f64,
    strides: [usize; 3],
    len: usize,
    active: Vec<bool>,
}

impl Grid {
    pub fn new(dim: usize, h: f64, radius: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::validation("dimension", "must be 1, 2 or 3"));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::validation("h", "must be positive"));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::validation("domain_radius", "must be positive"));
        }
        let n = (radius / h + 1e-9).floor() as i64 + 1;
        let side = (2 * n + 1) as usize;
        let mut strides = [0usize; 3];
        let mut len = 1usize;
        for s in strides.iter_mut().take(dim) {
            *s = len;
            len *= side;
        }
        let mut grid = Grid {
            dim,
            h,
            n,
            side,
            radius,
            strides,
            len,
            active: Vec::new(),
        };
        let tol = radius * 1e-12;
        grid.active = (0..len)
            .map(|i| norm(&grid.center(i)) <= radius + tol)
            .collect();
        Ok(grid)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn half_extent(&self) -> i64 {
        self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn origin(&self) -> Point {
        let mut p = ORIGIN;
        for c in p.iter_mut().take(self.dim) {
            *c = -(self.n as f64) * self.h;
        }
        p
    }

    pub fn extents(&self) -> Vec<usize> {
        vec![self.side; self.dim]
    }

    pub fn multi(&self, idx: usize) -> [i64; 3] {
        let mut m = [0i64; 3];
        let mut r = idx;
        for c in m.iter_mut().take(self.dim) {
            *c = (r % self.side) as i64 - self.n;
            r /= self.side;
        }
        m
    }

    pub fn index(&self, m: &[i64; 3]) -> Option<usize> {
        let mut idx = 0usize;
        for k in 0..self.dim {
            let c = m[k] + self.n;
            if c < 0 || c >= self.side as i64 {
                return None;
            }
            idx += c as usize * self.strides[k];
        }
        for c in m.iter().skip(self.dim) {
            if *c != 0 {
                return None;
            }
        }
        Some(idx)
    }

    pub fn center(&self, idx: usize) -> Point {
        let m = self.multi(idx);
        let mut p = ORIGIN;
        for k in 0..self.dim {
            p[k] = m[k] as f64 * self.h;
        }
        p
    }

    /// Index of the cell whose centre is closest to `x`, if it lies on the grid.
    pub fn locate(&self, x: &Point) -> Option<usize> {
        let mut m = [0i64; 3];
        for k in 0..self.dim {
            m[k] = (x[k] / self.h).round() as i64;
        }
        self.index(&m)
    }

    pub fn neighbor(&self, idx: usize, axis: usize, forward: bool) -> Option<usize> {
        let c = (idx / self.strides[axis]) % self.side;
        if forward {
            (c + 1 < self.side).then(|| idx + self.strides[axis])
        } else {
            (c > 0).then(|| idx - self.strides[axis])
        }
    }

    pub fn is_active(&self, idx: usize) -> bool {
        self.active[idx]
    }

    pub fn active_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.active[i])
    }
}

/// Nonnegative cell-averaged density on a [`Grid`].
#[derive(Clone, Debug)]
pub struct GridField {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn zeros(grid: Arc<Grid>) -> Self {
        let values = vec![0.0; grid.len()];
        GridField { grid, values }
    }

    /// Samples `f` at the centres of active cells.
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&Point) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|i| {
                if grid.is_active(i) {
                    f(&grid.center(i))
                } else {
                    0.0
                }
            })
            .collect();
        GridField { grid, values }
    }

    pub fn from_values(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::validation(
                "values",
                format!("expected {} cells, got {}", grid.len(), values.len()),
            ));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::validation("values", "must be finite and nonnegative"));
        }
        Ok(GridField { grid, values })
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn h(&self) -> f64 {
        self.grid.h()
    }

    pub fn mass(&self) -> f64 {
        let vol = self.grid.cell_volume();
        self.values.iter().map(|v| v * vol).sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn l1_distance(&self, other: &GridField) -> f64 {
        let vol = self.grid.cell_volume();
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs() * vol)
            .sum()
    }

    /// Largest `|x|` over cells whose value exceeds `threshold`.
    pub fn support_radius(&self, threshold: f64) -> f64 {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > threshold)
            .map(|(i, _)| norm(&self.grid.center(i)))
            .fold(0.0, f64::max)
    }

    pub fn support_cells(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn scaled(&self, s: f64) -> GridField {
        GridField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// Rescales the field so that its mass equals `mass`.
    pub fn normalized_to(&self, mass: f64) -> Result<GridField> {
        let m = self.mass();
        if m <= 0.0 {
            return Err(Error::EmptyMeasure);
        }
        Ok(self.scaled(mass / m))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Atom {
    pub pos: Point,
    pub weight: f64,
}

/// Finite signed measure made of weighted point masses in a closed ball.
#[derive(Clone, Debug)]
pub struct DiscreteMeasure {
    pub dim: usize,
    pub atoms: Vec<Atom>,
    pub domain_radius: f64,
    /// Atoms closer than this (in every coordinate) are treated as coincident.
    pub merge_tol: f64,
}

pub const DEFAULT_MERGE_TOL: f64 = 1e-9;

impl DiscreteMeasure {
    pub fn new(dim: usize, atoms: Vec<Atom>, domain_radius: f64) -> Result<Self> {
        let tol = 1e-12 * domain_radius.max(1.0);
        for a in &atoms {
            if !a.weight.is_finite() {
                return Err(Error::validation("atoms", "weights must be finite"));
            }
            if norm(&a.pos) > domain_radius + tol {
                return Err(Error::domain(
                    "DiscreteMeasure::new",
                    format!(
                        "atom at distance {} outside the ball of radius {}",
                        norm(&a.pos),
                        domain_radius
                    ),
                ));
            }
        }
        Ok(DiscreteMeasure {
            dim,
            atoms,
            domain_radius,
            merge_tol: DEFAULT_MERGE_TOL,
        })
    }

    pub fn empty(dim: usize, domain_radius: f64) -> Self {
        DiscreteMeasure {
            dim,
            atoms: Vec::new(),
            domain_radius,
            merge_tol: DEFAULT_MERGE_TOL,
        }
    }

    pub fn dirac(dim: usize, pos: Point, weight: f64) -> Self {
        DiscreteMeasure {
            dim,
            atoms: vec![Atom { pos, weight }],
            domain_radius: norm(&pos),
            merge_tol: DEFAULT_MERGE_TOL,
        }
    }

    pub fn with_merge_tol(mut self, tol: f64) -> Self {
        self.merge_tol = tol;
        self
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Signed total mass `mu(R^d)`.
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.atoms.iter().all(|a| a.weight >= 0.0)
    }

    /// Sum of absolute weights after merging coincident atoms.
    pub fn total_variation(&self) -> f64 {
        self.merged().atoms.iter().map(|a| a.weight.abs()).sum()
    }

    /// Merges atoms that coincide within `merge_tol` and drops zero weights.
    /// Surviving atoms keep the order of their first occurrence.
    pub fn merged(&self) -> DiscreteMeasure {
        let n = self.atoms.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            self.atoms[a].pos[0]
                .partial_cmp(&self.atoms[b].pos[0])
                .unwrap()
        });
        let tol = self.merge_tol;
        let mut cluster = vec![usize::MAX; n];
        let mut reps: Vec<usize> = Vec::new();
        for &i in &order {
            let p = &self.atoms[i].pos;
            let mut found = None;
            for &r in reps.iter().rev() {
                let q = &self.atoms[r].pos;
                if q[0] < p[0] - tol {
                    break;
                }
                if (0..3).all(|k| (q[k] - p[k]).abs() <= tol) {
                    found = Some(cluster[r]);
                    break;
                }
            }
            cluster[i] = match found {
                Some(c) => c,
                None => {
                    reps.push(i);
                    i
                }
            };
        }
        let mut weight = vec![0.0; n];
        for i in 0..n {
            weight[cluster[i]] += self.atoms[i].weight;
        }
        let atoms = (0..n)
            .filter(|&i| cluster[i] == i && weight[i] != 0.0)
            .map(|i| Atom {
                pos: self.atoms[i].pos,
                weight: weight[i],
            })
            .collect();
        DiscreteMeasure {
            dim: self.dim,
            atoms,
            domain_radius: self.domain_radius,
            merge_tol: self.merge_tol,
        }
    }

    pub fn scaled(&self, s: f64) -> DiscreteMeasure {
        let mut out = self.clone();
        for a in &mut out.atoms {
            a.weight *= s;
        }
        out
    }

    /// Returns `self - other` without merging.
    pub fn difference(&self, other: &DiscreteMeasure) -> DiscreteMeasure {
        let mut atoms = self.atoms.clone();
        atoms.extend(other.atoms.iter().map(|a| Atom {
            pos: a.pos,
            weight: -a.weight,
        }));
        DiscreteMeasure {
            dim: self.dim,
            atoms,
            domain_radius: self.domain_radius.max(other.domain_radius),
            merge_tol: self.merge_tol.max(other.merge_tol),
        }
    }

    /// Positive and negative parts of the merged measure, as nonnegative weights.
    pub fn jordan(&self) -> (Vec<Atom>, Vec<Atom>) {
        let m = self.merged();
        let pos = m.atoms.iter().filter(|a| a.weight > 0.0).cloned().collect();
        let neg = m
            .atoms
            .iter()
            .filter(|a| a.weight < 0.0)
            .map(|a| Atom {
                pos: a.pos,
                weight: -a.weight,
            })
            .collect();
        (pos, neg)
    }

    pub fn to_json(&self) -> Value {
        let atoms: Vec<Value> = self
            .atoms
            .iter()
            .map(|a| {
                let mut row: Vec<f64> = a.pos[..self.dim].to_vec();
                row.push(a.weight);
                json!(row)
            })
            .collect();
        json!({
            "dimension": self.dim,
            "domain_radius": self.domain_radius,
            "atoms": atoms,
        })
    }

    /// Accepts either an object with `dimension`, `atoms` and optional
    /// `domain_radius`, or a bare array of `[x.., weight]` rows.
    pub fn from_json(v: &Value) -> Result<Self> {
        let (rows, dim_hint, radius) = match v {
            Value::Array(rows) => (rows.clone(), None, None),
            Value::Object(map) => {
                for k in map.keys() {
                    if !["dimension", "domain_radius", "atoms"].contains(&k.as_str()) {
                        return Err(Error::Parse(format!("unknown measure key `{k}`")));
                    }
                }
                let rows = map
                    .get("atoms")
                    .and_then(Value::as_array)
                    .cloned()
                    .ok_or_else(|| Error::Parse("measure needs an `atoms` array".into()))?;
                let dim = map.get("dimension").and_then(Value::as_u64).map(|d| d as usize);
                let radius = map.get("domain_radius").and_then(Value::as_f64);
                (rows, dim, radius)
            }
            _ => return Err(Error::Parse("measure must be an array or object".into())),
        };
        let mut atoms = Vec::with_capacity(rows.len());
        let mut dim = dim_hint;
        for (i, row) in rows.iter().enumerate() {
            let nums: Vec<f64> = row
                .as_array()
                .ok_or_else(|| Error::Parse(format!("atom {i} is not an array")))?
                .iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| Error::Parse(format!("atom {i} has a non-numeric entry")))
                })
                .collect::<Result<_>>()?;
            if nums.len() < 2 {
                return Err(Error::Parse(format!("atom {i} needs coordinates and a weight")));
            }
            let d = nums.len() - 1;
            match dim {
                None => dim = Some(d),
                Some(dd) if dd != d => {
                    return Err(Error::Parse(format!(
                        "atom {i} has {d} coordinates, expected {dd}"
                    )))
                }
                _ => {}
            }
            atoms.push(Atom {
                pos: point(&nums[..d]),
                weight: nums[d],
            });
        }
        let dim = dim.ok_or_else(|| Error::Parse("cannot infer measure dimension".into()))?;
        if !(1..=3).contains(&dim) {
            return Err(Error::Parse(format!("unsupported dimension {dim}")));
        }
        let radius = radius.unwrap_or_else(|| {
            atoms.iter().map(|a| norm(&a.pos)).fold(0.0, f64::max)
        });
        DiscreteMeasure::new(dim, atoms, radius)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_json(&v)
    }

    /// Cumulative distribution table `(x, F(x))` of a one-dimensional measure.
    pub fn cdf_table(&self) -> Vec<(f64, f64)> {
        let mut m = self.merged();
        m.atoms
            .sort_by(|a, b| a.pos[0].partial_cmp(&b.pos[0]).unwrap());
        let mut acc = 0.0;
        m.atoms
            .iter()
            .map(|a| {
                acc += a.weight;
                (a.pos[0], acc)
            })
            .collect()
    }
}

/// One atom per nonzero cell, placed at the cell centre with weight `u_i h^d`.
pub fn field_to_measure(u: &GridField) -> DiscreteMeasure {
    let vol = u.grid.cell_volume();
    let atoms = u
        .values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
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

pub fn total_variation(mu: &DiscreteMeasure) -> f64 {
    mu.total_variation()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p1(x: f64) -> Point {
        point(&[x])
    }

    #[test]
    fn total_variation_examples() {
        let a = DiscreteMeasure::new(1, vec![Atom { pos: p1(0.0), weight: 1.0 }], 1.0).unwrap();
        assert_eq!(a.total_variation(), 1.0);
        let b = DiscreteMeasure::new(
            1,
            vec![
                Atom { pos: p1(0.0), weight: 1.0 },
                Atom { pos: p1(0.0), weight: -1.0 },
            ],
            1.0,
        )
        .unwrap();
        assert_eq!(b.total_variation(), 0.0);
        let c = DiscreteMeasure::new(
            1,
            vec![
                Atom { pos: p1(0.0), weight: 2.0 },
                Atom { pos: p1(0.3), weight: -1.0 },
            ],
            1.0,
        )
        .unwrap();
        assert_eq!(c.total_variation(), 3.0);
    }

    #[test]
    fn field_to_measure_examples() {
        let g = Arc::new(Grid::new(2, 0.1, 1.0).unwrap());
        let z = GridField::zeros(g.clone());
        assert!(field_to_measure(&z).is_empty());
        let mut u = GridField::zeros(g.clone());
        let c = g.locate(&point(&[0.2, -0.3])).unwrap();
        u.values[c] = 3.0;
        let mu = field_to_measure(&u);
        assert_eq!(mu.len(), 1);
        assert_relative_eq!(mu.atoms[0].weight, 3.0 * 0.01, max_relative = 1e-15);
    }

    #[test]
    fn grid_indexing_roundtrip() {
        let g = Grid::new(2, 0.25, 1.0).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.index(&g.multi(i)), Some(i));
            assert_eq!(g.locate(&g.center(i)), Some(i));
        }
        let o = g.locate(&ORIGIN).unwrap();
        assert_eq!(norm(&g.center(o)), 0.0);
        assert!(g.is_active(o));
    }

    #[test]
    fn json_roundtrip() {
        let mu = DiscreteMeasure::new(
            2,
            vec![
                Atom { pos: point(&[0.1, 0.2]), weight: 0.5 },
                Atom { pos: point(&[-0.1, 0.0]), weight: 1.5 },
            ],
            0.5,
        )
        .unwrap();
        let back = DiscreteMeasure::from_json(&mu.to_json()).unwrap();
        assert_eq!(back.atoms, mu.atoms);
        assert_eq!(back.domain_radius, 0.5);
        let bare = DiscreteMeasure::from_json_str("[[0.2, 1.0]]").unwrap();
        assert_eq!(bare.dim, 1);
    }

    #[test]
    fn atoms_outside_ball_rejected() {
        let r = DiscreteMeasure::new(1, vec![Atom { pos: p1(2.0), weight: 1.0 }], 1.0);
        assert!(matches!(r, Err(Error::Domain { .. })));
    }
}
