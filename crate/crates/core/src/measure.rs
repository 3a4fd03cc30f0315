//! Finitely supported probability measures on ℝ^d, their moments, and
//! Wasserstein distances between them.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::solve_transport;

/// Tolerance under which a weight vector is renormalized instead of rejected.
pub const RENORMALIZE_TOL: f64 = 1e-9;
/// Two atoms closer than this (in every coordinate) are the same point.
pub const ATOM_MERGE_TOL: f64 = 1e-12;
/// Largest support size accepted by the dense transport solver.
pub const LP_MAX_ATOMS: usize = 200;

/// A weighted particle cloud `Σ_k w_k δ_{x_k}`.
///
/// Points are stored flat, `dim` coordinates per atom.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MeasureRepr {
    dim: usize,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl Serialize for DiscreteMeasure {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MeasureRepr {
            dim: self.dim,
            points: self.iter().map(|(x, _)| x.to_vec()).collect(),
            weights: self.weights.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DiscreteMeasure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MeasureRepr::deserialize(d)?;
        DiscreteMeasure::new(repr.dim, &repr.points, repr.weights).map_err(serde::de::Error::custom)
    }
}

impl DiscreteMeasure {
    pub fn new(dim: usize, points: &[Vec<f64>], weights: Vec<f64>) -> Result<Self> {
        let mut flat = Vec::with_capacity(points.len() * dim);
        for (k, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::InvalidMeasure(format!(
                    "atom {k} has dimension {}, expected {dim}",
                    p.len()
                )));
            }
            flat.extend_from_slice(p);
        }
        Self::from_flat(dim, flat, weights)
    }

    /// Builds a measure from flat coordinates. Weights within
    /// [`RENORMALIZE_TOL`] of unit mass are renormalized; anything further off
    /// is rejected.
    pub fn from_flat(dim: usize, points: Vec<f64>, mut weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("dimension must be positive".into()));
        }
        if weights.is_empty() {
            return Err(Error::InvalidMeasure("measure needs at least one atom".into()));
        }
        if points.len() != weights.len() * dim {
            return Err(Error::InvalidMeasure(format!(
                "{} coordinates for {} atoms of dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        if let Some(k) = points.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidMeasure(format!(
                "non-finite coordinate in atom {}",
                k / dim
            )));
        }
        if let Some(k) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidMeasure(format!(
                "weight {k} is {} (must be finite and nonnegative)",
                weights[k]
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > RENORMALIZE_TOL {
            return Err(Error::InvalidMeasure(format!(
                "weights sum to {total}, not 1"
            )));
        }
        for w in weights.iter_mut() {
            *w /= total;
        }
        Ok(Self {
            dim,
            points,
            weights,
        })
    }

    pub fn dirac(point: &[f64]) -> Self {
        Self {
            dim: point.len().max(1),
            points: if point.is_empty() { vec![0.0] } else { point.to_vec() },
            weights: vec![1.0],
        }
    }

    /// Uniform weights on the given flat atoms.
    pub fn uniform_flat(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::InvalidMeasure(format!(
                "{} coordinates cannot form atoms of dimension {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        Self::from_flat(dim, points, vec![1.0 / n as f64; n])
    }

    /// Uniform measure with all atoms at the origin; callers overwrite the
    /// points through [`Self::points_mut`]. Used as a reusable scratch buffer
    /// for empirical measures inside quadrature loops.
    pub(crate) fn scratch_empirical(dim: usize, n: usize) -> Self {
        Self {
            dim,
            points: vec![0.0; dim * n],
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub(crate) fn points_mut(&mut self) -> &mut [f64] {
        &mut self.points
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }

    pub fn points_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.points
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (x, w) in self.iter() {
            for (mi, xi) in m.iter_mut().zip(x) {
                *mi += w * xi;
            }
        }
        m
    }

    /// Largest Euclidean norm over the support.
    pub fn support_radius(&self) -> f64 {
        self.iter().map(|(x, _)| norm(x)).fold(0.0, f64::max)
    }

    /// Mass carried by atoms with `|x| > radius`.
    pub fn tail_mass(&self, radius: f64) -> f64 {
        self.iter()
            .filter(|(x, _)| norm(x) > radius)
            .map(|(_, w)| w)
            .sum()
    }

    /// Atoms closer than [`ATOM_MERGE_TOL`] coordinatewise are merged and
    /// zero-weight atoms dropped; the result is sorted lexicographically.
    pub fn merged(&self) -> DiscreteMeasure {
        let mut atoms: Vec<(Vec<f64>, f64)> = self
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(x, w)| (x.to_vec(), w))
            .collect();
        atoms.sort_by(|a, b| {
            a.0.iter()
                .zip(b.0.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut out: Vec<(Vec<f64>, f64)> = Vec::with_capacity(atoms.len());
        for (x, w) in atoms {
            match out.iter_mut().find(|(y, _)| {
                x.iter()
                    .zip(y.iter())
                    .all(|(a, b)| (a - b).abs() <= ATOM_MERGE_TOL)
            }) {
                Some((_, acc)) => *acc += w,
                None => out.push((x, w)),
            }
        }
        let mut points = Vec::with_capacity(out.len() * self.dim);
        let mut weights = Vec::with_capacity(out.len());
        for (x, w) in out {
            points.extend(x);
            weights.push(w);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        DiscreteMeasure {
            dim: self.dim,
            points,
            weights,
        }
    }

    /// Equality as measures after atom merging, with weights compared to
    /// `weight_tol`.
    pub fn same_measure(&self, other: &DiscreteMeasure, weight_tol: f64) -> bool {
        if self.dim != other.dim {
            return false;
        }
        let a = self.merged();
        let b = other.merged();
        a.len() == b.len()
            && a.iter().zip(b.iter()).all(|((x, w), (y, v))| {
                (w - v).abs() <= weight_tol
                    && x.iter().zip(y).all(|(p, q)| (p - q).abs() <= ATOM_MERGE_TOL)
            })
    }

    /// Index of the atom selected by a uniform draw `u ∈ [0,1)` through the
    /// cumulative weights.
    pub fn atom_for_uniform(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        self.len() - 1
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &[f64] {
        let u: f64 = rng.random();
        self.point(self.atom_for_uniform(u))
    }

    /// `n` atoms drawn by stratified inverse-CDF at `(j + 1/2)/n`.
    pub fn stratified_atoms(&self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|j| self.atom_for_uniform((j as f64 + 0.5) / n as f64))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One atom per row: `weight,x1,...,xd` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("weight");
        for c in 0..self.dim {
            let _ = write!(out, ",x{}", c + 1);
        }
        out.push('\n');
        for (x, w) in self.iter() {
            let _ = write!(out, "{w:?}");
            for xi in x {
                let _ = write!(out, ",{xi:?}");
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// `V^{p1,p2}_K = { μ : M_{p2}(μ) ≤ K }`, compact in `W_{p1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentBall {
    p1: f64,
    p2: f64,
    bound: f64,
}

impl MomentBall {
    pub fn new(p1: f64, p2: f64, bound: f64) -> Result<Self> {
        if !(p1 >= 1.0 && p2 > p1) {
            return Err(Error::InvalidArgument(format!(
                "moment ball needs p2 > p1 >= 1 (got p1={p1}, p2={p2})"
            )));
        }
        if !(bound > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "moment ball bound must be positive (got {bound})"
            )));
        }
        Ok(Self { p1, p2, bound })
    }

    pub fn p1(&self) -> f64 {
        self.p1
    }

    pub fn p2(&self) -> f64 {
        self.p2
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Markov bound `K / R^{p2}` on the mass outside radius `R`.
    pub fn tail_bound(&self, radius: f64) -> f64 {
        self.bound / radius.powf(self.p2)
    }
}

/// `M_p(μ) = Σ_k w_k |x_k|^p`.
pub fn moment(mu: &DiscreteMeasure, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!("moment order must be >= 1 (got {p})")));
    }
    Ok(mu.iter().map(|(x, w)| w * norm(x).powf(p)).sum())
}

pub fn in_moment_ball(mu: &DiscreteMeasure, ball: &MomentBall) -> bool {
    // p2 > p1 >= 1 by construction.
    moment(mu, ball.p2).map(|m| m <= ball.bound).unwrap_or(false)
}

/// Uniform-weight measure on the given samples.
pub fn empirical_of(samples: &[Vec<f64>]) -> Result<DiscreteMeasure> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidMeasure("empirical measure of no samples".into()));
    };
    let n = samples.len();
    DiscreteMeasure::new(first.len(), samples, vec![1.0 / n as f64; n])
}

fn check_order(q: f64) -> Result<()> {
    if q >= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "Wasserstein order must be >= 1 (got {q})"
        )))
    }
}

/// Exact `W_q` on the real line by the monotone (quantile) coupling.
pub fn wasserstein_1d(mu: &DiscreteMeasure, nu: &DiscreteMeasure, q: f64) -> Result<f64> {
    check_order(q)?;
    for m in [mu, nu] {
        if m.dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: m.dim(),
            });
        }
    }
    let sorted = |m: &DiscreteMeasure| {
        let mut v: Vec<(f64, f64)> = m.iter().map(|(x, w)| (x[0], w)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let a = sorted(mu);
    let b = sorted(nu);
    // Integrate |F^{-1}(u) - G^{-1}(u)|^q over the merged CDF breakpoints.
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ca, mut cb) = (a[0].1, b[0].1);
    let mut prev = 0.0f64;
    let mut cost = 0.0;
    loop {
        let last_a = i + 1 == a.len();
        let last_b = j + 1 == b.len();
        let gap = (a[i].0 - b[j].0).abs().powf(q);
        if last_a && last_b {
            cost += (1.0 - prev).max(0.0) * gap;
            break;
        }
        let step_a = !last_a && (last_b || ca <= cb);
        let next = if step_a { ca } else { cb };
        cost += (next - prev).max(0.0) * gap;
        prev = prev.max(next);
        if step_a {
            i += 1;
            ca += a[i].1;
        } else {
            j += 1;
            cb += b[j].1;
        }
    }
    Ok(cost.max(0.0).powf(1.0 / q))
}

/// Exact `W_q` in any dimension by solving the transport linear program.
pub fn wasserstein_lp(mu: &DiscreteMeasure, nu: &DiscreteMeasure, q: f64) -> Result<f64> {
    check_order(q)?;
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    if mu.len() > LP_MAX_ATOMS || nu.len() > LP_MAX_ATOMS {
        return Err(Error::InvalidArgument(format!(
            "supports of {} and {} atoms exceed the dense LP limit of {LP_MAX_ATOMS}",
            mu.len(),
            nu.len()
        )));
    }
    let mut cost = Vec::with_capacity(mu.len() * nu.len());
    for (x, _) in mu.iter() {
        for (y, _) in nu.iter() {
            cost.push(dist(x, y).powf(q));
        }
    }
    let plan = solve_transport(mu.weights(), nu.weights(), &cost)?;
    Ok(plan.cost.max(0.0).powf(1.0 / q))
}

/// Dispatches to the quantile formula on ℝ and to the LP otherwise.
pub fn wasserstein(mu: &DiscreteMeasure, nu: &DiscreteMeasure, q: f64) -> Result<f64> {
    if mu.dim() == 1 && nu.dim() == 1 {
        wasserstein_1d(mu, nu, q)
    } else {
        wasserstein_lp(mu, nu, q)
    }
}
