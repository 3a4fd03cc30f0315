//! Explicit finite-difference solver for the n-particle Bellman equation on
//! a truncated box, with the derivative bound checks run on its output.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mollify::ParticleCoefficients;
use crate::particle::FeedbackTable;
use crate::problem::ProblemSpec;
use crate::rng::{stream, StreamRole};

/// Largest `d·n` accepted by the dense solver.
pub const MAX_GRID_DIM: usize = 3;
/// Largest number of lattice nodes per time slice.
pub const MAX_NODES: usize = 4_000_000;
/// Terminal-slice slope at the box boundary above which a warning is
/// recorded (copy-out boundaries assume a flat exterior).
pub const BOUNDARY_SLOPE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Stepping {
    /// Substeps chosen from the stability bound times `safety`.
    Auto { safety: f64 },
    /// Fixed substeps per output slice; a CFL violation is an error.
    Fixed { substeps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Half-width `R` of the box `[-R, R]^{dn}`.
    pub radius: f64,
    /// Nodes per axis.
    pub nodes: usize,
    pub eps: f64,
    /// Stored time slices after `t = 0` (the lattice is `T·k/slices`).
    pub slices: usize,
    pub stepping: Stepping,
}

impl GridSpec {
    pub fn new(radius: f64, nodes: usize, eps: f64) -> Self {
        Self {
            radius,
            nodes,
            eps,
            slices: 20,
            stepping: Stepping::Auto { safety: 0.9 },
        }
    }

    /// Box sized so that `μ` puts less than `1e-3` mass beyond `R/2`, with
    /// half a unit of margin.
    pub fn for_measure(mu: &crate::DiscreteMeasure, nodes: usize, eps: f64) -> Self {
        let mut norms: Vec<f64> = mu.iter().map(|(x, _)| crate::measure::norm(x)).collect();
        norms.sort_by(f64::total_cmp);
        let r = norms
            .iter()
            .copied()
            .find(|&r| mu.tail_mass(r) < 1e-3)
            .unwrap_or_else(|| mu.support_radius());
        Self::new(2.0 * r + 0.5, nodes, eps)
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.radius / (self.nodes - 1) as f64
    }

    fn validate(&self) -> Result<()> {
        if self.nodes < 5 {
            return Err(Error::InvalidArgument(format!("need ≥ 5 nodes per axis (got {})", self.nodes)));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("box radius must be positive (got {})", self.radius)));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps must be ≥ 0 (got {})", self.eps)));
        }
        if self.slices == 0 {
            return Err(Error::InvalidArgument("need at least one time slice".into()));
        }
        match self.stepping {
            Stepping::Auto { safety } if !(safety > 0.0 && safety <= 1.0) => Err(Error::InvalidArgument(
                format!("CFL safety factor must lie in (0, 1] (got {safety})"),
            )),
            Stepping::Fixed { substeps: 0 } => Err(Error::InvalidArgument("substeps must be ≥ 1".into())),
            _ => Ok(()),
        }
    }
}

/// `Q = blockdiag(σσᵀ(t, x^i, a^i)) + ε² I + S Sᵀ` with `S` stacking the
/// `σ⁰(t, x^i)` blocks.
#[derive(Debug, Clone)]
pub struct DiffusionMatrix {
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub q: Vec<f64>,
}

impl DiffusionMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.q[r * self.dim + c]
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.dim {
            for c in 0..r {
                worst = worst.max((self.get(r, c) - self.get(c, r)).abs());
            }
        }
        worst
    }

    /// Eigenvalues in increasing order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let m = DMatrix::from_row_slice(self.dim, self.dim, &self.q);
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

/// Assembles `Q` at `(t, x̄)` for per-particle actions `actions[i]`.
pub fn assemble_q(p: &ProblemSpec, t: f64, xbar: &[f64], actions: &[&[f64]], eps: f64) -> Result<DiffusionMatrix> {
    let d = p.dim();
    let n = actions.len();
    if xbar.len() != d * n {
        return Err(Error::DimensionMismatch {
            expected: d * n,
            got: xbar.len(),
        });
    }
    let dn = d * n;
    let mut q = vec![0.0; dn * dn];
    let mut s0 = Vec::with_capacity(n);
    for i in 0..n {
        let xi = &xbar[i * d..(i + 1) * d];
        let s = p.sigma(t, xi, actions[i]);
        for r in 0..d {
            for c in 0..d {
                let v: f64 = (0..d).map(|k| s[r * d + k] * s[c * d + k]).sum();
                q[(i * d + r) * dn + i * d + c] += v;
            }
        }
        s0.push(p.sigma0(t, xi));
    }
    for i in 0..n {
        for j in 0..n {
            for r in 0..d {
                for c in 0..d {
                    let v: f64 = (0..d).map(|k| s0[i][r * d + k] * s0[j][c * d + k]).sum();
                    q[(i * d + r) * dn + j * d + c] += v;
                }
            }
        }
    }
    for k in 0..dn {
        q[k * dn + k] += eps * eps;
    }
    Ok(DiffusionMatrix { dim: dn, q })
}

/// Metadata stored alongside the node values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub problem: String,
    pub coefficients: String,
    pub dim: usize,
    pub n: usize,
    pub horizon: f64,
    pub grid: GridSpec,
    pub times: Vec<f64>,
    pub substeps_per_slice: usize,
    pub dt: f64,
    /// Largest stable time step of the explicit scheme.
    pub cfl_bound: f64,
    /// `(1 + T) K`.
    pub value_bound: f64,
    /// Largest `|v̄|` minus `value_bound` when positive.
    pub value_bound_excess: f64,
    pub boundary_warning: Option<String>,
}

/// Tabulated `v̄_{ε,n,m}` on `times × [-R, R]^{dn}`.
#[derive(Debug, Clone)]
pub struct ValueGrid {
    pub header: GridHeader,
    /// `values[slice · nodes^{dn} + flat node]`; axis 0 varies slowest.
    values: Vec<f64>,
}

/// Lattice geometry shared by the solver and the grid queries.
#[derive(Debug, Clone, Copy)]
struct Lattice {
    dn: usize,
    nodes: usize,
    radius: f64,
    h: f64,
}

impl Lattice {
    fn total(&self) -> usize {
        self.nodes.pow(self.dn as u32)
    }

    fn stride(&self, axis: usize) -> usize {
        self.nodes.pow((self.dn - 1 - axis) as u32)
    }

    fn index(&self, flat: usize, axis: usize) -> usize {
        (flat / self.stride(axis)) % self.nodes
    }

    fn coord(&self, i: usize) -> f64 {
        if i == self.nodes - 1 {
            self.radius
        } else {
            -self.radius + i as f64 * self.h
        }
    }

    fn point(&self, flat: usize, out: &mut [f64]) {
        for (ax, v) in out.iter_mut().enumerate() {
            *v = self.coord(self.index(flat, ax));
        }
    }

    /// Signed stride offsets of the clamped `+1` and `−1` neighbours.
    fn offsets(&self, flat: usize) -> (Vec<isize>, Vec<isize>) {
        let mut plus = vec![0isize; self.dn];
        let mut minus = vec![0isize; self.dn];
        for ax in 0..self.dn {
            let i = self.index(flat, ax);
            let s = self.stride(ax) as isize;
            plus[ax] = if i + 1 < self.nodes { s } else { 0 };
            minus[ax] = if i > 0 { -s } else { 0 };
        }
        (plus, minus)
    }
}

/// Finite differences of one slice at one node.
struct Stencil {
    up: Vec<f64>,
    down: Vec<f64>,
    /// Row-major `dn × dn` second differences.
    second: Vec<f64>,
}

fn stencil(v: &[f64], lat: &Lattice, flat: usize) -> Stencil {
    let dn = lat.dn;
    let h = lat.h;
    let (plus, minus) = lat.offsets(flat);
    let at = |off: isize| v[(flat as isize + off) as usize];
    let c = v[flat];
    let mut up = vec![0.0; dn];
    let mut down = vec![0.0; dn];
    let mut second = vec![0.0; dn * dn];
    for p in 0..dn {
        let vp = at(plus[p]);
        let vm = at(minus[p]);
        up[p] = (vp - c) / h;
        down[p] = (c - vm) / h;
        second[p * dn + p] = (vp - 2.0 * c + vm) / (h * h);
        for q in 0..p {
            let x = (at(plus[p] + plus[q]) - at(plus[p] + minus[q]) - at(minus[p] + plus[q]) + at(minus[p] + minus[q]))
                / (4.0 * h * h);
            second[p * dn + q] = x;
            second[q * dn + p] = x;
        }
    }
    Stencil { up, down, second }
}

/// Coefficients tabulated at every node and action for one time.
struct Tables {
    k: usize,
    n: usize,
    d: usize,
    /// `[node][action][dn]`
    b: Vec<f64>,
    /// `[node][action][n]`
    f: Vec<f64>,
    /// `[node][action][particle][d·d]` of `σσᵀ`.
    ss: Vec<f64>,
    /// `[node][dn·dn]` of `ε² I + S Sᵀ`.
    fixed: Vec<f64>,
}

fn build_tables(pc: &dyn ParticleCoefficients, lat: &Lattice, t: f64, eps: f64) -> Tables {
    let p = pc.problem();
    let (d, n, k) = (p.dim(), pc.n(), p.n_controls());
    let dn = d * n;
    let total = lat.total();
    let mut b = vec![0.0; total * k * dn];
    let mut f = vec![0.0; total * k * n];
    let mut ss = vec![0.0; total * k * n * d * d];
    let mut fixed = vec![0.0; total * dn * dn];
    b.par_chunks_mut(k * dn)
        .zip(f.par_chunks_mut(k * n))
        .zip(ss.par_chunks_mut(k * n * d * d))
        .zip(fixed.par_chunks_mut(dn * dn))
        .enumerate()
        .for_each(|(node, (((b, f), ss), fixed))| {
            let mut x = vec![0.0; dn];
            lat.point(node, &mut x);
            fill_node(pc, t, &x, eps, b, f, ss, fixed);
        });
    Tables { k, n, d, b, f, ss, fixed }
}

/// Tables for the single node `flat`, stored at index 0.
fn build_tables_at(pc: &dyn ParticleCoefficients, lat: &Lattice, t: f64, eps: f64, flat: usize) -> Tables {
    let p = pc.problem();
    let (d, n, k) = (p.dim(), pc.n(), p.n_controls());
    let dn = d * n;
    let mut x = vec![0.0; dn];
    lat.point(flat, &mut x);
    let mut b = vec![0.0; k * dn];
    let mut f = vec![0.0; k * n];
    let mut ss = vec![0.0; k * n * d * d];
    let mut fixed = vec![0.0; dn * dn];
    fill_node(pc, t, &x, eps, &mut b, &mut f, &mut ss, &mut fixed);
    Tables { k, n, d, b, f, ss, fixed }
}

#[allow(clippy::too_many_arguments)]
fn fill_node(
    pc: &dyn ParticleCoefficients,
    t: f64,
    x: &[f64],
    eps: f64,
    b: &mut [f64],
    f: &mut [f64],
    ss: &mut [f64],
    fixed: &mut [f64],
) {
    let p = pc.problem();
    let (d, n, k) = (p.dim(), pc.n(), p.n_controls());
    let dn = d * n;
    let coeffs = p.coefficients();
    let mut sig = vec![0.0; d * d];
    for a in 0..k {
        let act = p.control(a);
        pc.drift_and_cost(t, x, act, &mut b[a * dn..(a + 1) * dn], &mut f[a * n..(a + 1) * n]);
        for i in 0..n {
            coeffs.sigma(t, &x[i * d..(i + 1) * d], act, &mut sig);
            let blk = &mut ss[(a * n + i) * d * d..(a * n + i + 1) * d * d];
            for r in 0..d {
                for c in 0..d {
                    blk[r * d + c] = (0..d).map(|q| sig[r * d + q] * sig[c * d + q]).sum();
                }
            }
        }
    }
    let s0: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut s = vec![0.0; d * d];
            coeffs.sigma0(t, &x[i * d..(i + 1) * d], &mut s);
            s
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            for r in 0..d {
                for c in 0..d {
                    fixed[(i * d + r) * dn + j * d + c] = (0..d).map(|q| s0[i][r * d + q] * s0[j][c * d + q]).sum();
                }
            }
        }
    }
    for q in 0..dn {
        fixed[q * dn + q] += eps * eps;
    }
}

impl Tables {
    /// Largest stable step: `1 / max_x(Σ Q_pp/h² + Σ_{p≠q} |Q_pq|/(2h²) + Σ |b_p|/h)`
    /// with the control-dependent parts maximized over actions.
    fn cfl_bound(&self, lat: &Lattice) -> f64 {
        let dn = lat.dn;
        let (k, n, d) = (self.k, self.n, self.d);
        let h = lat.h;
        let rate = (0..lat.total())
            .into_par_iter()
            .map(|node| {
                let fixed = &self.fixed[node * dn * dn..(node + 1) * dn * dn];
                let mut diag = 0.0;
                let mut off = 0.0;
                let mut adv = 0.0;
                for pp in 0..dn {
                    let (i, r) = (pp / d, pp % d);
                    let mut best_diag: f64 = 0.0;
                    let mut best_adv: f64 = 0.0;
                    let mut best_off = vec![0.0f64; d];
                    for a in 0..k {
                        let blk = &self.ss[((node * k + a) * n + i) * d * d..((node * k + a) * n + i + 1) * d * d];
                        best_diag = best_diag.max(blk[r * d + r]);
                        for c in 0..d {
                            if c != r {
                                best_off[c] = best_off[c].max(blk[r * d + c].abs());
                            }
                        }
                        best_adv = best_adv.max(self.b[(node * k + a) * dn + pp].abs());
                    }
                    diag += best_diag + fixed[pp * dn + pp];
                    adv += best_adv;
                    off += best_off.iter().sum::<f64>();
                    for qq in 0..dn {
                        if qq != pp {
                            off += fixed[pp * dn + qq].abs();
                        }
                    }
                }
                diag / (h * h) + off / (2.0 * h * h) + adv / h
            })
            .reduce(|| 0.0, f64::max);
        if rate > 0.0 {
            1.0 / rate
        } else {
            f64::INFINITY
        }
    }

    /// Per-particle, per-action Hamiltonian terms `H_i(a)` and the
    /// action-independent diffusion term at `node`.
    fn hamiltonian(&self, node: usize, st: &Stencil, dn: usize) -> (Vec<f64>, f64) {
        let (k, n, d) = (self.k, self.n, self.d);
        let mut terms = vec![0.0; n * k];
        for i in 0..n {
            for a in 0..k {
                let base = (node * k + a) * dn;
                let mut h = self.f[(node * k + a) * n + i] / n as f64;
                for r in 0..d {
                    let pp = i * d + r;
                    let bv = self.b[base + pp];
                    h += if bv > 0.0 { bv * st.up[pp] } else { bv * st.down[pp] };
                }
                let blk = &self.ss[((node * k + a) * n + i) * d * d..((node * k + a) * n + i + 1) * d * d];
                for r in 0..d {
                    for c in 0..d {
                        h += 0.5 * blk[r * d + c] * st.second[(i * d + r) * dn + i * d + c];
                    }
                }
                terms[i * k + a] = h;
            }
        }
        let fixed = &self.fixed[node * dn * dn..(node + 1) * dn * dn];
        let diffusion = 0.5 * fixed.iter().zip(&st.second).map(|(q, s)| q * s).sum::<f64>();
        (terms, diffusion)
    }
}

/// Backward explicit time stepping of the n-particle Bellman equation
/// driven by `pc` (smoothed or raw coefficients).
pub fn solve_bellman(pc: &dyn ParticleCoefficients, grid: &GridSpec) -> Result<ValueGrid> {
    grid.validate()?;
    let p = pc.problem();
    let d = p.dim();
    let n = pc.n();
    let dn = d * n;
    if dn > MAX_GRID_DIM {
        return Err(Error::GridTooLarge(format!(
            "d·n = {dn} exceeds the dense solver cap {MAX_GRID_DIM}"
        )));
    }
    let lat = Lattice {
        dn,
        nodes: grid.nodes,
        radius: grid.radius,
        h: grid.spacing(),
    };
    if (grid.nodes as f64).powi(dn as i32) > MAX_NODES as f64 {
        return Err(Error::GridTooLarge(format!(
            "{}^{dn} nodes exceed {MAX_NODES}",
            grid.nodes
        )));
    }
    let total = lat.total();
    let horizon = p.horizon();
    let times: Vec<f64> = (0..=grid.slices)
        .map(|k| if k == grid.slices { horizon } else { horizon * k as f64 / grid.slices as f64 })
        .collect();
    let interval = horizon / grid.slices as f64;

    let mut terminal = vec![0.0; total];
    terminal.par_iter_mut().enumerate().for_each(|(node, v)| {
        let mut x = vec![0.0; dn];
        lat.point(node, &mut x);
        let mut g = vec![0.0; n];
        pc.terminal_costs(&x, &mut g);
        *v = g.iter().sum::<f64>() / n as f64;
    });

    let homogeneous = pc.time_homogeneous();
    let mut tables = build_tables(pc, &lat, horizon, grid.eps);
    let cfl = tables.cfl_bound(&lat);
    let substeps = match grid.stepping {
        Stepping::Auto { safety } => {
            if cfl.is_finite() {
                ((interval / (safety * cfl)).ceil() as usize).max(1)
            } else {
                1
            }
        }
        Stepping::Fixed { substeps } => {
            let dt = interval / substeps as f64;
            if dt > cfl {
                return Err(Error::Cfl { dt, bound: cfl });
            }
            substeps
        }
    };
    let dt = interval / substeps as f64;

    let mut values = vec![0.0; total * (grid.slices + 1)];
    values[grid.slices * total..].copy_from_slice(&terminal);
    let mut cur = terminal.clone();
    let mut next = vec![0.0; total];
    for slice in (0..grid.slices).rev() {
        for sub in 0..substeps {
            // Explicit step from t + dt back to t; coefficients at t + dt.
            let t_hi = times[slice + 1] - sub as f64 * dt;
            if !homogeneous {
                tables = build_tables(pc, &lat, t_hi, grid.eps);
                let bound = tables.cfl_bound(&lat);
                if dt > bound {
                    return Err(Error::Cfl { dt, bound });
                }
            }
            next.par_iter_mut().enumerate().for_each(|(node, out)| {
                let st = stencil(&cur, &lat, node);
                let (terms, diffusion) = tables.hamiltonian(node, &st, dn);
                let k = tables.k;
                let ham: f64 = (0..n)
                    .map(|i| terms[i * k..(i + 1) * k].iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .sum();
                *out = cur[node] + dt * (ham + diffusion);
            });
            std::mem::swap(&mut cur, &mut next);
            if let Some(bad) = cur.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step: slice * substeps + sub,
                    scenario: 0,
                    particle: bad,
                });
            }
        }
        values[slice * total..(slice + 1) * total].copy_from_slice(&cur);
    }

    let bound = p.value_bound();
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let boundary_slope = boundary_slope(&terminal, &lat);
    let boundary_warning = (boundary_slope > BOUNDARY_SLOPE_TOL).then(|| {
        format!(
            "terminal condition has slope {boundary_slope:.3e} across the box boundary; copy-out boundary may bias values near ±R"
        )
    });
    Ok(ValueGrid {
        header: GridHeader {
            problem: p.name.clone(),
            coefficients: pc.label(),
            dim: d,
            n,
            horizon,
            grid: *grid,
            times,
            substeps_per_slice: substeps,
            dt,
            cfl_bound: cfl,
            value_bound: bound,
            value_bound_excess: (max_abs - bound).max(0.0),
            boundary_warning,
        },
        values,
    })
}

fn boundary_slope(v: &[f64], lat: &Lattice) -> f64 {
    let mut worst: f64 = 0.0;
    for node in 0..lat.total() {
        for ax in 0..lat.dn {
            let i = lat.index(node, ax);
            let s = lat.stride(ax);
            if i == 0 {
                worst = worst.max((v[node + s] - v[node]).abs() / lat.h);
            } else if i == lat.nodes - 1 {
                worst = worst.max((v[node] - v[node - s]).abs() / lat.h);
            }
        }
    }
    worst
}

/// Outcome of the decomposed-versus-joint maximization comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub nodes_checked: usize,
    pub mismatches: usize,
    pub max_abs_difference: f64,
}

impl ValueGrid {
    fn lattice(&self) -> Lattice {
        let g = &self.header.grid;
        Lattice {
            dn: self.header.dim * self.header.n,
            nodes: g.nodes,
            radius: g.radius,
            h: g.spacing(),
        }
    }

    pub fn n(&self) -> usize {
        self.header.n
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.header.times
    }

    pub fn nodes_per_slice(&self) -> usize {
        self.lattice().total()
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let total = self.nodes_per_slice();
        &self.values[k * total..(k + 1) * total]
    }

    pub fn node_point(&self, flat: usize) -> Vec<f64> {
        let lat = self.lattice();
        let mut x = vec![0.0; lat.dn];
        lat.point(flat, &mut x);
        x
    }

    /// Index of the slice at time `t`, if `t` is on the lattice.
    pub fn slice_at(&self, t: f64) -> Option<usize> {
        self.header.times.iter().position(|s| (s - t).abs() <= 1e-12 * self.header.horizon.max(1.0))
    }

    fn interp_slice(&self, k: usize, xbar: &[f64]) -> Result<f64> {
        let lat = self.lattice();
        if xbar.len() != lat.dn {
            return Err(Error::DimensionMismatch {
                expected: lat.dn,
                got: xbar.len(),
            });
        }
        let slack = 1e-12 * lat.radius;
        let outside: Vec<usize> = (0..lat.dn).filter(|&ax| xbar[ax].abs() > lat.radius + slack).collect();
        if !outside.is_empty() {
            return Err(Error::OutsideGrid { atoms: outside });
        }
        let v = self.slice(k);
        let mut base = 0usize;
        let mut frac = vec![0.0; lat.dn];
        for ax in 0..lat.dn {
            let u = ((xbar[ax] + lat.radius) / lat.h).clamp(0.0, (lat.nodes - 1) as f64);
            let i = (u.floor() as usize).min(lat.nodes - 2);
            frac[ax] = u - i as f64;
            base += i * lat.stride(ax);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << lat.dn) {
            let mut w = 1.0;
            let mut off = 0usize;
            for ax in 0..lat.dn {
                if corner >> ax & 1 == 1 {
                    w *= frac[ax];
                    off += lat.stride(ax);
                } else {
                    w *= 1.0 - frac[ax];
                }
            }
            if w != 0.0 {
                acc += w * v[base + off];
            }
        }
        Ok(acc)
    }

    /// Multilinear interpolation in space; linear in time between slices.
    /// The flag is true when `t` is not on the time lattice.
    pub fn value(&self, t: f64, xbar: &[f64]) -> Result<(f64, bool)> {
        if let Some(k) = self.slice_at(t) {
            return Ok((self.interp_slice(k, xbar)?, false));
        }
        let times = &self.header.times;
        if !(t >= times[0] && t <= *times.last().unwrap()) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, T]")));
        }
        let k = times.iter().rposition(|s| *s <= t).unwrap();
        let w = (t - times[k]) / (times[k + 1] - times[k]);
        let a = self.interp_slice(k, xbar)?;
        let b = self.interp_slice(k + 1, xbar)?;
        Ok(((1.0 - w) * a + w * b, true))
    }

    /// Centered first differences at a node (one-sided at the boundary).
    pub fn gradient_at(&self, k: usize, flat: usize) -> Vec<f64> {
        let lat = self.lattice();
        let st = stencil(self.slice(k), &lat, flat);
        (0..lat.dn)
            .map(|p| {
                let i = lat.index(flat, p);
                if i == 0 {
                    st.up[p]
                } else if i == lat.nodes - 1 {
                    st.down[p]
                } else {
                    0.5 * (st.up[p] + st.down[p])
                }
            })
            .collect()
    }

    /// Second differences at a node, row-major `dn × dn`.
    pub fn hessian_at(&self, k: usize, flat: usize) -> Vec<f64> {
        let lat = self.lattice();
        stencil(self.slice(k), &lat, flat).second
    }

    /// `sup |∇_{x^i} v̄|` for each particle over all slices, measured as the
    /// largest edge slope of the interpolant per coordinate (the exact
    /// Lipschitz constant of a multilinear interpolant in that coordinate),
    /// combined in Euclidean norm over the particle's `d` coordinates.
    pub fn gradient_sup(&self) -> Vec<f64> {
        let lat = self.lattice();
        let d = self.header.dim;
        let n = self.header.n;
        let mut per_axis = vec![0.0f64; lat.dn];
        for k in 0..self.header.times.len() {
            let v = self.slice(k);
            let slopes: Vec<f64> = (0..lat.dn)
                .into_par_iter()
                .map(|ax| {
                    let s = lat.stride(ax);
                    (0..lat.total())
                        .filter(|&node| lat.index(node, ax) + 1 < lat.nodes)
                        .map(|node| (v[node + s] - v[node]).abs() / lat.h)
                        .fold(0.0, f64::max)
                })
                .collect();
            for (a, s) in per_axis.iter_mut().zip(slopes) {
                *a = a.max(s);
            }
        }
        (0..n)
            .map(|i| per_axis[i * d..(i + 1) * d].iter().map(|s| s * s).sum::<f64>().sqrt())
            .collect()
    }

    /// Largest and smallest second difference (diagonal and cross) over the
    /// slices in `slices`.
    pub fn second_difference_range(&self, slices: std::ops::Range<usize>) -> (f64, f64) {
        let lat = self.lattice();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in slices {
            let v = self.slice(k);
            let (a, b) = (0..lat.total())
                .into_par_iter()
                .map(|node| {
                    let st = stencil(v, &lat, node);
                    st.second
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), s| (l.min(*s), h.max(*s)))
                })
                .reduce(|| (f64::INFINITY, f64::NEG_INFINITY), |x, y| (x.0.min(y.0), x.1.max(y.1)));
            lo = lo.min(a);
            hi = hi.max(b);
        }
        (lo, hi)
    }

    /// Per-particle Hamiltonian terms `H_i(a)` at slice `k`, node `flat`,
    /// recomputed from the coefficients (`n × |A|`, row-major).
    pub fn hamiltonian_terms(&self, pc: &dyn ParticleCoefficients, k: usize, flat: usize) -> Result<Vec<f64>> {
        let lat = self.lattice();
        self.check_coefficients(pc)?;
        let t = self.header.times[k];
        let tables = build_tables_at(pc, &lat, t, self.header.grid.eps, flat);
        let st = stencil(self.slice(k), &lat, flat);
        Ok(tables.hamiltonian(0, &st, lat.dn).0)
    }

    fn check_coefficients(&self, pc: &dyn ParticleCoefficients) -> Result<()> {
        if pc.n() != self.header.n || pc.problem().dim() != self.header.dim {
            return Err(Error::InvalidArgument(format!(
                "coefficients {} do not match grid {}",
                pc.label(),
                self.header.coefficients
            )));
        }
        Ok(())
    }

    /// Compares `Σ_i max_a H_i(a)` with the maximum of `Σ_i H_i(a^i)` over
    /// all joint actions at random nodes and slices. Equality is exact since
    /// floating-point addition is monotone.
    pub fn decomposition_check(
        &self,
        pc: &dyn ParticleCoefficients,
        n_nodes: usize,
        seed: u64,
    ) -> Result<DecompositionReport> {
        let n = self.header.n;
        let k = pc.problem().n_controls();
        let total = self.nodes_per_slice();
        let slices = self.header.times.len() - 1;
        let mut mismatches = 0;
        let mut worst: f64 = 0.0;
        for s in 0..n_nodes {
            let mut rng = stream(seed, StreamRole::Sampler, 3, s as u64);
            let node = rng.random_range(0..total);
            let slice = rng.random_range(0..slices);
            let h = self.hamiltonian_terms(pc, slice, node)?;
            let decomposed: f64 = (0..n)
                .map(|i| h[i * k..(i + 1) * k].iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .sum();
            let mut joint = f64::NEG_INFINITY;
            let mut idx = vec![0usize; n];
            loop {
                let v: f64 = (0..n).map(|i| h[i * k + idx[i]]).sum();
                joint = joint.max(v);
                let mut carry = true;
                for j in idx.iter_mut() {
                    if !carry {
                        break;
                    }
                    *j += 1;
                    carry = *j == k;
                    if carry {
                        *j = 0;
                    }
                }
                if carry {
                    break;
                }
            }
            if joint != decomposed {
                mismatches += 1;
                worst = worst.max((joint - decomposed).abs());
            }
        }
        Ok(DecompositionReport {
            nodes_checked: n_nodes,
            mismatches,
            max_abs_difference: worst,
        })
    }

    /// Greedy feedback of a single-particle grid: at every slice and node,
    /// the action maximizing the Hamiltonian.
    pub fn feedback_table(&self, pc: &dyn ParticleCoefficients) -> Result<FeedbackTable> {
        self.check_coefficients(pc)?;
        if self.header.n != 1 {
            return Err(Error::InvalidArgument("feedback tables are built from n = 1 grids".into()));
        }
        let lat = self.lattice();
        let k = pc.problem().n_controls();
        let total = lat.total();
        let slices = self.header.times.len();
        let mut actions = vec![0usize; slices * total];
        for s in 0..slices {
            let t = self.header.times[s];
            let tables = build_tables(pc, &lat, t, self.header.grid.eps);
            let v = self.slice(s);
            actions[s * total..(s + 1) * total]
                .par_iter_mut()
                .enumerate()
                .for_each(|(node, out)| {
                    let st = stencil(v, &lat, node);
                    let (terms, _) = tables.hamiltonian(node, &st, lat.dn);
                    let mut best = 0;
                    for a in 1..k {
                        if terms[a] > terms[best] {
                            best = a;
                        }
                    }
                    *out = best;
                });
        }
        FeedbackTable::new(
            self.header.times.clone(),
            vec![-lat.radius; lat.dn],
            vec![lat.radius; lat.dn],
            vec![lat.nodes; lat.dn],
            actions,
        )
    }

    /// JSON header and CSV payload (`slice,node,value`, values printed with
    /// round-trip precision).
    pub fn to_text(&self) -> Result<(String, String)> {
        let header = serde_json::to_string_pretty(&self.header)?;
        let total = self.nodes_per_slice();
        let mut csv = String::with_capacity(self.values.len() * 24);
        csv.push_str("slice,node,value\n");
        for (i, v) in self.values.iter().enumerate() {
            csv.push_str(&format!("{},{},{:?}\n", i / total, i % total, v));
        }
        Ok((header, csv))
    }

    pub fn from_text(header: &str, csv: &str) -> Result<Self> {
        let header: GridHeader = serde_json::from_str(header)?;
        let dn = header.dim * header.n;
        let total = header.grid.nodes.pow(dn as u32);
        let expected = total * header.times.len();
        let mut values = vec![f64::NAN; expected];
        // Comment lines and the column header are skipped.
        for (line_no, line) in csv.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') || line.starts_with("slice,") {
                continue;
            }
            let mut parts = line.split(',');
            let mut field = |name: &str| {
                parts
                    .next()
                    .ok_or_else(|| Error::Parse(format!("line {}: missing {name}", line_no + 1)))
            };
            let slice: usize = field("slice")?
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: slice: {e}", line_no + 1)))?;
            let node: usize = field("node")?
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: node: {e}", line_no + 1)))?;
            let value: f64 = field("value")?
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: value: {e}", line_no + 1)))?;
            let idx = slice * total + node;
            if node >= total || idx >= expected {
                return Err(Error::Parse(format!("line {}: index out of range", line_no + 1)));
            }
            values[idx] = value;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Parse("payload does not cover every node".into()));
        }
        Ok(Self { header, values })
    }

    /// Writes `<prefix>.json` and `<prefix>.csv`.
    pub fn save(&self, prefix: &std::path::Path) -> Result<()> {
        let (h, c) = self.to_text()?;
        std::fs::write(prefix.with_extension("json"), h)?;
        std::fs::write(prefix.with_extension("csv"), c)?;
        Ok(())
    }

    pub fn load(prefix: &std::path::Path) -> Result<Self> {
        let h = std::fs::read_to_string(prefix.with_extension("json"))?;
        let c = std::fs::read_to_string(prefix.with_extension("csv"))?;
        Self::from_text(&h, &c)
    }

    /// Constant-in-space grid, mostly for tests.
    pub fn from_fn(header: GridHeader, f: impl Fn(f64, &[f64]) -> f64) -> Self {
        let lat = Lattice {
            dn: header.dim * header.n,
            nodes: header.grid.nodes,
            radius: header.grid.radius,
            h: header.grid.spacing(),
        };
        let total = lat.total();
        let mut values = Vec::with_capacity(total * header.times.len());
        let mut x = vec![0.0; lat.dn];
        for &t in &header.times {
            for node in 0..total {
                lat.point(node, &mut x);
                values.push(f(t, &x));
            }
        }
        Self { header, values }
    }
}

/// Gradient scaling across particle numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientReport {
    /// `(n, max_i sup |∇_{x^i} v̄|, n · sup)` per grid.
    pub rows: Vec<(usize, f64, f64)>,
    /// `n · sup` at the smallest `n`.
    pub fitted_constant: f64,
    /// `max(n · sup) / min(n · sup) − 1`.
    pub spread: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Allowed relative spread of `n · sup |∇ v̄|` across `n`.
pub const GRADIENT_SPREAD_TOL: f64 = 0.25;

pub fn gradient_bound_check(grids: &[&ValueGrid]) -> GradientReport {
    let mut rows: Vec<(usize, f64, f64)> = grids
        .iter()
        .map(|g| {
            let sup = g.gradient_sup().into_iter().fold(0.0, f64::max);
            (g.n(), sup, g.n() as f64 * sup)
        })
        .collect();
    rows.sort_by_key(|r| r.0);
    let scaled: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let hi = scaled.iter().copied().fold(0.0, f64::max);
    let lo = scaled.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = if hi == 0.0 { 0.0 } else { hi / lo - 1.0 };
    GradientReport {
        fitted_constant: scaled.first().copied().unwrap_or(0.0),
        rows,
        spread,
        tolerance: GRADIENT_SPREAD_TOL,
        pass: spread <= GRADIENT_SPREAD_TOL,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvatureRow {
    pub eps: f64,
    /// Smallest second difference over all slices.
    pub lower: f64,
    /// Largest second difference over the slices before the horizon.
    pub upper_interior: f64,
    /// Largest second difference including the terminal slice.
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub rows: Vec<CurvatureRow>,
    /// `max ε² · upper_interior`: the fitted constant of the `C/ε²` bound.
    pub fitted_constant: f64,
    /// Largest `upper_interior(ε/2) / upper_interior(ε)` over halvings.
    pub worst_halving_growth: f64,
    /// Uniform lower bound across `ε` (the most negative entry).
    pub uniform_lower: f64,
    pub pass: bool,
}

/// Upper curvature may grow by at most `4 × (1 + 0.3)` per halving of ε.
pub const CURVATURE_GROWTH_LIMIT: f64 = 4.0 * 1.3;

pub fn second_derivative_bound_check(vg: &ValueGrid) -> CurvatureRow {
    let slices = vg.times().len();
    let (lower, upper) = vg.second_difference_range(0..slices);
    let (_, upper_interior) = vg.second_difference_range(0..slices - 1);
    CurvatureRow {
        eps: vg.header.grid.eps,
        lower,
        upper_interior,
        upper,
    }
}

/// Curvature bounds over a family of ε (each grid solved with its own ε).
pub fn curvature_ladder(grids: &[&ValueGrid]) -> Result<CurvatureReport> {
    if grids.iter().any(|g| !(g.header.grid.eps > 0.0)) {
        return Err(Error::InvalidArgument("curvature bounds need ε > 0".into()));
    }
    let mut rows: Vec<CurvatureRow> = grids.iter().map(|g| second_derivative_bound_check(g)).collect();
    rows.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    let fitted_constant = rows.iter().map(|r| r.eps * r.eps * r.upper_interior.max(0.0)).fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    for w in rows.windows(2) {
        if w[0].upper_interior > 0.0 {
            worst = worst.max(w[1].upper_interior / w[0].upper_interior);
        }
    }
    let uniform_lower = rows.iter().map(|r| r.lower).fold(f64::INFINITY, f64::min);
    Ok(CurvatureReport {
        rows,
        fitted_constant,
        worst_halving_growth: worst,
        uniform_lower,
        pass: worst <= CURVATURE_GROWTH_LIMIT && uniform_lower.is_finite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mollify::{build_mollified, MollifierSpec, RawParticleCoefficients};
    use crate::problem::{benchmark, control_grid, FnCoefficients, ProblemConstants};
    use std::sync::Arc;

    fn problem(c: FnCoefficients) -> ProblemSpec {
        ProblemSpec::new(
            "test",
            1,
            1.0,
            control_grid(1, -1.0, 1.0, 3),
            Arc::new(c.time_homogeneous(true)),
            ProblemConstants { k: 1.0, rho: 0.0, beta: 1.0 },
        )
        .unwrap()
    }

    #[test]
    fn q_examples() {
        let zero = problem(FnCoefficients::new());
        let a: &[f64] = &[0.0];
        let q = assemble_q(&zero, 0.0, &[0.1, 0.2], &[a, a], 1.0).unwrap();
        assert_eq!(q.q, vec![1.0, 0.0, 0.0, 1.0]);

        let common = problem(FnCoefficients::new().sigma0(|_, _, o| o[0] = 1.0));
        let q = assemble_q(&common, 0.0, &[0.1, 0.2], &[a, a], 0.0).unwrap();
        assert_eq!(q.q, vec![1.0, 1.0, 1.0, 1.0]);
        let ev = q.eigenvalues();
        assert!(ev[0].abs() < 1e-12 && (ev[1] - 2.0).abs() < 1e-12);

        let both = problem(FnCoefficients::new().sigma0(|_, _, o| o[0] = 1.0).sigma(|_, _, _, o| o[0] = 1.0));
        let q = assemble_q(&both, 0.0, &[0.1, 0.2], &[a, a], 0.1).unwrap();
        assert_eq!(q.max_asymmetry(), 0.0);
        let ev = q.eigenvalues();
        assert!((ev[0] - 1.01).abs() < 1e-12 && (ev[1] - 3.01).abs() < 1e-12);
    }

    #[test]
    fn zero_costs_give_zero_value() {
        let p = problem(FnCoefficients::new().drift(|_, x, _, a, o| o[0] = a[0] * x[0].sin()));
        let mc = build_mollified(&p, 2, MollifierSpec::new(8)).unwrap();
        let vg = solve_bellman(&mc, &GridSpec::new(2.0, 11, 0.3)).unwrap();
        assert!(vg.values.iter().all(|v| *v == 0.0));
        let r = gradient_bound_check(&[&vg]);
        assert_eq!(r.rows[0].1, 0.0);
        let c = second_derivative_bound_check(&vg);
        assert_eq!((c.lower, c.upper), (0.0, 0.0));
    }

    #[test]
    fn unit_running_cost_integrates_time() {
        let p = problem(
            FnCoefficients::new()
                .running_cost(|_, _, _, _| 1.0)
                .drift(|_, x, _, a, o| o[0] = 0.5 * a[0] * x[0].cos())
                .sigma(|_, _, _, o| o[0] = 0.3),
        );
        let mc = build_mollified(&p, 1, MollifierSpec::new(8)).unwrap();
        let vg = solve_bellman(&mc, &GridSpec::new(2.0, 101, 0.2)).unwrap();
        for (k, t) in vg.times().iter().enumerate() {
            for v in vg.slice(k) {
                assert!((v - (1.0 - t)).abs() < 1e-3);
            }
        }
        assert!(vg.gradient_sup().iter().all(|g| *g < 1e-9));
    }

    #[test]
    fn terminal_slice_is_exact() {
        let p = benchmark("mean-reverting-mf").unwrap();
        let mc = build_mollified(&p, 2, MollifierSpec::new(8)).unwrap();
        let vg = solve_bellman(&mc, &GridSpec::new(2.0, 9, 0.2)).unwrap();
        let last = vg.times().len() - 1;
        for node in 0..vg.nodes_per_slice() {
            let x = vg.node_point(node);
            assert_eq!(vg.slice(last)[node], mc.terminal_value(&x));
        }
        assert!(vg.header.boundary_warning.is_some());
    }

    #[test]
    fn decomposition_is_exact() {
        let p = benchmark("mean-reverting-mf").unwrap();
        let mc = build_mollified(&p, 2, MollifierSpec::new(8)).unwrap();
        let vg = solve_bellman(&mc, &GridSpec::new(2.0, 15, 0.2)).unwrap();
        let r = vg.decomposition_check(&mc, 100, 1).unwrap();
        assert_eq!(r.mismatches, 0);
    }

    #[test]
    fn fixed_stepping_reports_cfl() {
        let p = benchmark("zero-cost").unwrap();
        let raw = RawParticleCoefficients::new(p, 1).unwrap();
        let mut grid = GridSpec::new(2.0, 201, 0.5);
        grid.stepping = Stepping::Fixed { substeps: 1 };
        assert!(matches!(solve_bellman(&raw, &grid), Err(Error::Cfl { .. })));
        grid.nodes = 3;
        assert!(solve_bellman(&raw, &grid).is_err());
    }

    #[test]
    fn dimension_cap() {
        let p = benchmark("zero-cost").unwrap();
        let raw = RawParticleCoefficients::new(p, 4).unwrap();
        assert!(matches!(solve_bellman(&raw, &GridSpec::new(2.0, 5, 0.1)), Err(Error::GridTooLarge(_))));
    }

    #[test]
    fn raising_running_cost_never_lowers_value() {
        let base = benchmark("decoupled-bounded").unwrap();
        let higher = base.clone().with_running_cost(|_, x, _, a| 0.2 * x[0].cos() - 0.05 * a[0] * a[0] + 0.1 * (1.0 + x[0].sin()));
        let grid = GridSpec::new(2.5, 41, 0.2);
        let lo = solve_bellman(&RawParticleCoefficients::new(base, 1).unwrap(), &grid).unwrap();
        let hi = solve_bellman(&RawParticleCoefficients::new(higher, 1).unwrap(), &grid).unwrap();
        assert!(lo.values.iter().zip(&hi.values).all(|(a, b)| b >= a));
    }

    #[test]
    fn exchangeable_problem_gives_symmetric_grid() {
        let p = benchmark("mean-reverting-mf").unwrap();
        let mc = build_mollified(&p, 2, MollifierSpec::new(8)).unwrap();
        let vg = solve_bellman(&mc, &GridSpec::new(2.0, 21, 0.2)).unwrap();
        for (x, y) in [(0.33, -1.1), (1.7, 0.05), (-0.4, -0.4)] {
            let a = vg.value(0.0, &[x, y]).unwrap().0;
            let b = vg.value(0.0, &[y, x]).unwrap().0;
            assert!((a - b).abs() < 1e-10, "{a} {b}");
        }
    }

    #[test]
    fn text_round_trip() {
        let p = benchmark("decoupled-bounded").unwrap();
        let mc = build_mollified(&p, 1, MollifierSpec::new(8)).unwrap();
        let vg = solve_bellman(&mc, &GridSpec::new(2.5, 21, 0.3)).unwrap();
        let (h, c) = vg.to_text().unwrap();
        let back = ValueGrid::from_text(&h, &c).unwrap();
        assert_eq!(back.header, vg.header);
        assert_eq!(back.values, vg.values);
        assert!(ValueGrid::from_text(&h, "slice,node,value\n0,0,1.0\n").is_err());
    }

    #[test]
    fn curvature_bounded_below_by_terminal_curvature() {
        // Frozen dynamics, f = 0, smooth g = min(x², 1) mollified: the
        // lower curvature tracks that of g (≈ −2·(bump-scale) at the kink).
        let p = problem(FnCoefficients::new().terminal_cost(|x, _| (x[0] * x[0]).min(1.0)));
        let mc = build_mollified(&p, 1, MollifierSpec::new(8)).unwrap();
        let vg = solve_bellman(&mc, &GridSpec::new(2.0, 81, 0.05)).unwrap();
        let row = second_derivative_bound_check(&vg);
        let (g_lo, _) = vg.second_difference_range(vg.times().len() - 1..vg.times().len());
        assert!(row.lower >= g_lo - 1e-9);
        assert!(g_lo < 0.0);
    }
}
