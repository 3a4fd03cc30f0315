//! Smooth n-particle coefficients obtained by convolving `b`, `f`, `g` with
//! scaled bump kernels in time and in every particle coordinate, and a
//! sampling check of their bounds, consistency, Lipschitz and convergence
//! properties.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{dist, norm, DiscreteMeasure};
use crate::problem::ProblemSpec;
use crate::rng::{stream, StreamRole};

/// Largest `d·n` handled by tensor-product quadrature.
pub const TENSOR_MAX_DN: usize = 4;
/// Upper limit on quadrature nodes per evaluation.
pub const NODE_BUDGET: usize = 2_000_000;
/// Levels compared by the convergence part of [`verify_mollifier_lemma`].
pub const GAP_LEVELS: [u32; 4] = [8, 16, 32, 64];

/// Unnormalized bump `exp(−1/(1−r²))` for `r < 1`, zero outside.
pub fn bump(r: f64) -> f64 {
    if r.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r * r)).exp()
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` (Golub–Welsch).
pub fn gauss_legendre(k: usize) -> Vec<(f64, f64)> {
    assert!(k >= 1);
    let mut jac = DMatrix::<f64>::zeros(k, k);
    for i in 1..k {
        let b = i as f64 / ((4 * i * i - 1) as f64).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut out: Vec<(f64, f64)> = (0..k)
        .map(|j| {
            let v0 = eig.eigenvectors[(0, j)];
            (eig.eigenvalues[j], 2.0 * v0 * v0)
        })
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrize to remove eigen-solver asymmetry in the last bits.
    for j in 0..k / 2 {
        let x = 0.5 * (out[k - 1 - j].0 - out[j].0);
        let w = 0.5 * (out[j].1 + out[k - 1 - j].1);
        out[j] = (-x, w);
        out[k - 1 - j] = (x, w);
    }
    if k % 2 == 1 {
        out[k / 2].0 = 0.0;
    }
    out
}

fn dense_rule() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(400))
}

/// Ratio `∫ r^p bump(r) r^{d−1} dr / ∫ bump(r) r^{d−1} dr` over `[0,1]`
/// by a dense Gauss–Legendre rule: the `p`-th moment of the normalized bump
/// on the unit ball of `ℝ^d`.
fn dense_radial_moment(d: usize, p: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &(x, w) in dense_rule() {
        let r = 0.5 * (x + 1.0);
        let base = w * bump(r) * r.powi(d as i32 - 1);
        num += base * r.powf(p);
        den += base;
    }
    num / den
}

/// Mollification level and quadrature configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollifierSpec {
    pub m: u32,
    /// Gauss–Legendre nodes per dimension.
    pub nodes: usize,
    /// Monte Carlo nodes used when `d·n` exceeds [`TENSOR_MAX_DN`]; `None`
    /// turns that case into an error.
    pub mc_samples: Option<usize>,
    pub mc_seed: u64,
}

impl MollifierSpec {
    pub fn new(m: u32) -> Self {
        Self {
            m,
            nodes: 7,
            mc_samples: None,
            mc_seed: 0,
        }
    }

    pub fn with_nodes(mut self, nodes: usize) -> Self {
        self.nodes = nodes;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidArgument("mollification level m must be ≥ 1".into()));
        }
        if self.nodes == 0 {
            return Err(Error::InvalidArgument("quadrature needs at least one node".into()));
        }
        Ok(())
    }

    /// Discrete kernel on the unit ball of `ℝ^d`: tensor Gauss–Legendre
    /// nodes weighted by the bump and renormalized to unit mass.
    pub fn space_rule(&self, d: usize) -> Vec<(Vec<f64>, f64)> {
        let gl = gauss_legendre(self.nodes);
        let mut rule: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 1.0)];
        for _ in 0..d {
            rule = rule
                .into_iter()
                .flat_map(|(p, w)| {
                    gl.iter().map(move |(x, v)| {
                        let mut q = p.clone();
                        q.push(*x);
                        (q, w * v)
                    })
                })
                .collect();
        }
        let mut rule: Vec<(Vec<f64>, f64)> = rule
            .into_iter()
            .map(|(p, w)| {
                let k = bump(norm(&p));
                (p, w * k)
            })
            .filter(|(_, w)| *w > 0.0)
            .collect();
        let total: f64 = rule.iter().map(|(_, w)| w).sum();
        for (_, w) in rule.iter_mut() {
            *w /= total;
        }
        rule
    }

    pub fn time_rule(&self) -> Vec<(f64, f64)> {
        self.space_rule(1).into_iter().map(|(p, w)| (p[0], w)).collect()
    }

    /// Mass the unnormalized tensor rule assigns to the bump, divided by the
    /// dense value of the same integral. Close to 1 when the node count
    /// resolves the kernel.
    pub fn raw_mass_ratio(&self, d: usize) -> f64 {
        let gl = gauss_legendre(self.nodes);
        let mut raw = 0.0;
        let mut idx = vec![0usize; d];
        loop {
            let p: Vec<f64> = idx.iter().map(|&i| gl[i].0).collect();
            let w: f64 = idx.iter().map(|&i| gl[i].1).product();
            raw += w * bump(norm(&p));
            if !advance(&mut idx, self.nodes) {
                break;
            }
        }
        // Dense: surface measure of the sphere times the radial integral.
        let radial: f64 = dense_rule()
            .iter()
            .map(|(x, w)| {
                let r = 0.5 * (x + 1.0);
                0.5 * w * bump(r) * r.powi(d as i32 - 1)
            })
            .sum();
        let dh = d as f64 / 2.0;
        let sphere = 2.0 * std::f64::consts::PI.powf(dh) / gamma(dh);
        raw / (sphere * radial)
    }

    /// A constant with `∫|y|^ρ Φ(y) dy ≤ c_phi_rho` for both the continuous
    /// kernel and its discrete rule.
    pub fn c_phi_rho(&self, d: usize, rho: f64) -> f64 {
        let dense = dense_radial_moment(d, rho);
        let discrete: f64 = self
            .space_rule(d)
            .iter()
            .map(|(p, w)| w * norm(p).powf(rho))
            .sum();
        dense.max(discrete)
    }
}

fn gamma(x: f64) -> f64 {
    // Only half-integers and integers are needed (sphere areas).
    if (x - x.round()).abs() < 1e-12 {
        (1..x.round() as u64).map(|k| k as f64).product()
    } else {
        let mut g = std::f64::consts::PI.sqrt();
        let mut y = 0.5;
        while y < x - 1e-12 {
            g *= y;
            y += 1.0;
        }
        g
    }
}

fn advance(idx: &mut [usize], base: usize) -> bool {
    for v in idx.iter_mut() {
        *v += 1;
        if *v < base {
            return true;
        }
        *v = 0;
    }
    false
}

/// Per-particle drift, running and terminal costs of an n-particle system,
/// evaluated for all particles at once with a common action.
pub trait ParticleCoefficients: Send + Sync {
    fn problem(&self) -> &ProblemSpec;
    fn n(&self) -> usize;
    /// Writes `b_i(t, x̄, a)` into `b_out[i·d..(i+1)·d]` and `f_i(t, x̄, a)`
    /// into `f_out[i]`.
    fn drift_and_cost(&self, t: f64, xbar: &[f64], a: &[f64], b_out: &mut [f64], f_out: &mut [f64]);
    fn terminal_costs(&self, xbar: &[f64], g_out: &mut [f64]);
    fn time_homogeneous(&self) -> bool {
        self.problem().coefficients().time_homogeneous()
    }
    /// Short identifier recorded in solver outputs.
    fn label(&self) -> String;
}

/// The unsmoothed particle coefficients `b(t, x^i, μ̂^{n,x̄}, a)` etc.
pub struct RawParticleCoefficients {
    problem: ProblemSpec,
    n: usize,
}

impl RawParticleCoefficients {
    pub fn new(problem: ProblemSpec, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be ≥ 1".into()));
        }
        Ok(Self { problem, n })
    }
}

impl ParticleCoefficients for RawParticleCoefficients {
    fn problem(&self) -> &ProblemSpec {
        &self.problem
    }

    fn n(&self) -> usize {
        self.n
    }

    fn drift_and_cost(&self, t: f64, xbar: &[f64], a: &[f64], b_out: &mut [f64], f_out: &mut [f64]) {
        let d = self.problem.dim();
        let mut mu = DiscreteMeasure::scratch_empirical(d, self.n);
        mu.points_mut().copy_from_slice(xbar);
        let c = self.problem.coefficients();
        for i in 0..self.n {
            let xi = &xbar[i * d..(i + 1) * d];
            c.drift(t, xi, &mu, a, &mut b_out[i * d..(i + 1) * d]);
            f_out[i] = c.running_cost(t, xi, &mu, a);
        }
    }

    fn terminal_costs(&self, xbar: &[f64], g_out: &mut [f64]) {
        let d = self.problem.dim();
        let mut mu = DiscreteMeasure::scratch_empirical(d, self.n);
        mu.points_mut().copy_from_slice(xbar);
        for i in 0..self.n {
            g_out[i] = self.problem.terminal_cost(&xbar[i * d..(i + 1) * d], &mu);
        }
    }

    fn label(&self) -> String {
        format!("{}/raw/n={}", self.problem.name, self.n)
    }
}

#[derive(Debug, Clone)]
enum Nodes {
    /// Per-particle space rule; combinations are enumerated.
    Tensor(Vec<(Vec<f64>, f64)>),
    /// Joint samples `y ∈ ℝ^{dn}` with equal weights.
    MonteCarlo(Vec<Vec<f64>>),
}

/// `b^i_{n,m}`, `f^i_{n,m}`, `g^i_{n,m}` evaluated by quadrature.
#[derive(Clone)]
pub struct MollifiedCoefficients {
    problem: ProblemSpec,
    n: usize,
    spec: MollifierSpec,
    c_phi_rho: f64,
    nodes: Nodes,
    /// Time nodes `s` (unscaled, in `[-1, 1]`) and weights; a single node at
    /// zero when the problem is time-homogeneous.
    time: Vec<(f64, f64)>,
}

impl std::fmt::Debug for MollifiedCoefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MollifiedCoefficients")
            .field("problem", &self.problem.name)
            .field("n", &self.n)
            .field("spec", &self.spec)
            .field("c_phi_rho", &self.c_phi_rho)
            .finish()
    }
}

pub fn build_mollified(p: &ProblemSpec, n: usize, spec: MollifierSpec) -> Result<MollifiedCoefficients> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be ≥ 1".into()));
    }
    let d = p.dim();
    let dn = d * n;
    let homogeneous = p.coefficients().time_homogeneous();
    let time = if homogeneous {
        vec![(0.0, 1.0)]
    } else {
        spec.time_rule()
    };
    let nodes = if dn <= TENSOR_MAX_DN {
        let rule = spec.space_rule(d);
        let total = (rule.len() as f64).powi(n as i32) * time.len() as f64;
        if total > NODE_BUDGET as f64 {
            return Err(Error::QuadratureBudget(format!(
                "{} space nodes per particle, n = {n}, {} time nodes: {total} evaluations exceed {NODE_BUDGET}",
                rule.len(),
                time.len()
            )));
        }
        Nodes::Tensor(rule)
    } else {
        let Some(samples) = spec.mc_samples else {
            return Err(Error::QuadratureBudget(format!(
                "d·n = {dn} exceeds the tensor cap {TENSOR_MAX_DN} and no Monte Carlo sample count is configured"
            )));
        };
        if samples == 0 || samples * time.len() > NODE_BUDGET {
            return Err(Error::QuadratureBudget(format!(
                "{samples} Monte Carlo nodes × {} time nodes outside (0, {NODE_BUDGET}]",
                time.len()
            )));
        }
        let mut rng = stream(spec.mc_seed, StreamRole::Quadrature, dn as u64, spec.m as u64);
        let peak = bump(0.0);
        let ys = (0..samples)
            .map(|_| {
                let mut y = Vec::with_capacity(dn);
                for _ in 0..n {
                    loop {
                        let c: Vec<f64> = (0..d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
                        if rng.random::<f64>() * peak < bump(norm(&c)) {
                            y.extend(c);
                            break;
                        }
                    }
                }
                y
            })
            .collect();
        Nodes::MonteCarlo(ys)
    };
    Ok(MollifiedCoefficients {
        problem: p.clone(),
        n,
        spec,
        c_phi_rho: spec.c_phi_rho(d, p.rho()),
        nodes,
        time,
    })
}

impl MollifiedCoefficients {
    pub fn m(&self) -> u32 {
        self.spec.m
    }

    pub fn spec(&self) -> &MollifierSpec {
        &self.spec
    }

    pub fn c_phi_rho(&self) -> f64 {
        self.c_phi_rho
    }

    /// Calls `visit(weight, shifted x̄)` for every space quadrature node.
    fn for_each_shift(&self, xbar: &[f64], mut visit: impl FnMut(f64, &DiscreteMeasure)) {
        let d = self.problem.dim();
        let n = self.n;
        let scale = 1.0 / self.spec.m as f64;
        let mut mu = DiscreteMeasure::scratch_empirical(d, n);
        match &self.nodes {
            Nodes::Tensor(rule) => {
                let mut idx = vec![0usize; n];
                loop {
                    let mut w = 1.0;
                    {
                        let pts = mu.points_mut();
                        for (j, &k) in idx.iter().enumerate() {
                            let (y, wk) = &rule[k];
                            w *= wk;
                            for c in 0..d {
                                pts[j * d + c] = xbar[j * d + c] - scale * y[c];
                            }
                        }
                    }
                    visit(w, &mu);
                    if !advance(&mut idx, rule.len()) {
                        break;
                    }
                }
            }
            Nodes::MonteCarlo(ys) => {
                let w = 1.0 / ys.len() as f64;
                for y in ys {
                    {
                        let pts = mu.points_mut();
                        for k in 0..d * n {
                            pts[k] = xbar[k] - scale * y[k];
                        }
                    }
                    visit(w, &mu);
                }
            }
        }
    }

    fn clamp_time(&self, t: f64, s: f64) -> f64 {
        (t - s / self.spec.m as f64).max(0.0).min(self.problem.horizon())
    }

    pub fn b_i(&self, i: usize, t: f64, xbar: &[f64], a: &[f64]) -> Vec<f64> {
        let d = self.problem.dim();
        let mut b = vec![0.0; d * self.n];
        let mut f = vec![0.0; self.n];
        self.drift_and_cost(t, xbar, a, &mut b, &mut f);
        b[i * d..(i + 1) * d].to_vec()
    }

    pub fn f_i(&self, i: usize, t: f64, xbar: &[f64], a: &[f64]) -> f64 {
        let d = self.problem.dim();
        let mut b = vec![0.0; d * self.n];
        let mut f = vec![0.0; self.n];
        self.drift_and_cost(t, xbar, a, &mut b, &mut f);
        f[i]
    }

    pub fn g_i(&self, i: usize, xbar: &[f64]) -> f64 {
        let mut g = vec![0.0; self.n];
        self.terminal_costs(xbar, &mut g);
        g[i]
    }

    /// `(1/n) Σ_i g_i(x̄)`, the terminal condition of the particle equation.
    pub fn terminal_value(&self, xbar: &[f64]) -> f64 {
        let mut g = vec![0.0; self.n];
        self.terminal_costs(xbar, &mut g);
        g.iter().sum::<f64>() / self.n as f64
    }

    /// The explicit right-hand side of the consistency bound for `b` and
    /// `f` (time term plus space term), evaluated with this quadrature.
    pub fn consistency_bound(&self, i: usize, t: f64) -> f64 {
        let k = self.problem.k();
        let beta = self.problem.beta();
        let time_term: f64 = if self.time.len() == 1 {
            // Time-homogeneous: the time convolution is skipped entirely.
            0.0
        } else {
            self.time
                .iter()
                .map(|(s, w)| w * (t - self.clamp_time(t, *s)).abs().powf(beta))
                .sum()
        };
        k * time_term + self.space_bound(i)
    }

    /// `K ∫ (|y^i| + (1/n) Σ_j |y^j|) Π Φ_m(y^k) dy` under this quadrature.
    pub fn space_bound(&self, i: usize) -> f64 {
        let d = self.problem.dim();
        let n = self.n;
        let scale = 1.0 / self.spec.m as f64;
        let mean_abs = match &self.nodes {
            Nodes::Tensor(rule) => {
                let e: f64 = rule.iter().map(|(y, w)| w * norm(y)).sum();
                // |y^i| and the average of n copies have the same mean.
                2.0 * e
            }
            Nodes::MonteCarlo(ys) => {
                let tot: f64 = ys
                    .iter()
                    .map(|y| {
                        let yi = norm(&y[i * d..(i + 1) * d]);
                        let avg: f64 = (0..n).map(|j| norm(&y[j * d..(j + 1) * d])).sum::<f64>() / n as f64;
                        yi + avg
                    })
                    .sum();
                tot / ys.len() as f64
            }
        };
        self.problem.k() * scale * mean_abs
    }
}

impl ParticleCoefficients for MollifiedCoefficients {
    fn problem(&self) -> &ProblemSpec {
        &self.problem
    }

    fn n(&self) -> usize {
        self.n
    }

    fn drift_and_cost(&self, t: f64, xbar: &[f64], a: &[f64], b_out: &mut [f64], f_out: &mut [f64]) {
        let d = self.problem.dim();
        let n = self.n;
        b_out.fill(0.0);
        f_out.fill(0.0);
        let c = self.problem.coefficients();
        let mut tmp = vec![0.0; d];
        let times: Vec<(f64, f64)> = self
            .time
            .iter()
            .map(|(s, w)| (if self.time.len() == 1 { t } else { self.clamp_time(t, *s) }, *w))
            .collect();
        self.for_each_shift(xbar, |w, mu| {
            for &(tau, wt) in &times {
                let ww = w * wt;
                for i in 0..n {
                    let xi = mu.point(i);
                    c.drift(tau, xi, mu, a, &mut tmp);
                    for k in 0..d {
                        b_out[i * d + k] += ww * tmp[k];
                    }
                    f_out[i] += ww * c.running_cost(tau, xi, mu, a);
                }
            }
        });
    }

    fn terminal_costs(&self, xbar: &[f64], g_out: &mut [f64]) {
        g_out.fill(0.0);
        let c = self.problem.coefficients();
        self.for_each_shift(xbar, |w, mu| {
            for (i, g) in g_out.iter_mut().enumerate() {
                *g += w * c.terminal_cost(mu.point(i), mu);
            }
        });
    }

    fn label(&self) -> String {
        format!("{}/mollified/n={}/m={}", self.problem.name, self.n, self.spec.m)
    }
}

/// Count and worst case of one sampled inequality.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BoundCheck {
    pub samples: usize,
    pub violations: usize,
    /// Largest observed left side divided by right side.
    pub worst_ratio: f64,
    pub worst_input: String,
}

impl BoundCheck {
    fn record(&mut self, lhs: f64, rhs: f64, tol: f64, input: impl FnOnce() -> String) {
        self.samples += 1;
        let r = if lhs <= 0.0 {
            0.0
        } else if rhs <= 0.0 {
            f64::INFINITY
        } else {
            lhs / rhs
        };
        if lhs > rhs + tol || !lhs.is_finite() {
            self.violations += 1;
        }
        if r > self.worst_ratio || (!lhs.is_finite() && self.worst_input.is_empty()) {
            self.worst_ratio = r;
            self.worst_input = input();
        }
    }

    fn merge(&mut self, other: BoundCheck) {
        self.samples += other.samples;
        self.violations += other.violations;
        if other.worst_ratio > self.worst_ratio {
            self.worst_ratio = other.worst_ratio;
            self.worst_input = other.worst_input;
        }
    }

    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapLevel {
    pub m: u32,
    /// Sup over the sample of the largest of the `b`, `f`, `g` gaps.
    pub sup_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MollifierReport {
    pub problem: String,
    pub n: usize,
    pub m: u32,
    pub c_phi_rho: f64,
    pub samples: usize,
    pub bound_f: BoundCheck,
    pub bound_g: BoundCheck,
    pub bound_b: BoundCheck,
    pub consistency: BoundCheck,
    pub lipschitz: BoundCheck,
    pub gap_levels: Vec<GapLevel>,
    /// Sampled points where the gap at the finest level is not below the gap
    /// at the coarsest one.
    pub pointwise_gap_violations: usize,
    pub gap_sup_decreasing: bool,
    pub pass: bool,
}

/// Absolute slack for the inequality checks (rounding only).
pub const BOUND_TOL: f64 = 1e-12;
/// Gaps at or below this at the coarsest level count as exact; the finest
/// level then only needs to stay below it as well.
pub const ZERO_GAP: f64 = 1e-12;

/// Samples `(t, x̄, z̄, a)` and checks the bound, consistency and Lipschitz
/// properties of `mc`, then rebuilds at every level of [`GAP_LEVELS`] to
/// check that the gap to the unsmoothed coefficients decreases.
pub fn verify_mollifier_lemma(
    mc: &MollifiedCoefficients,
    p: &ProblemSpec,
    n_samples: usize,
    seed: u64,
) -> Result<MollifierReport> {
    let d = p.dim();
    let n = mc.n;
    let dn = d * n;
    let k = p.k();
    let levels: Vec<MollifiedCoefficients> = GAP_LEVELS
        .iter()
        .map(|&m| build_mollified(p, n, MollifierSpec { m, ..mc.spec }))
        .collect::<Result<_>>()?;
    let raw = RawParticleCoefficients::new(p.clone(), n)?;

    struct Partial {
        bound_f: BoundCheck,
        bound_g: BoundCheck,
        bound_b: BoundCheck,
        consistency: BoundCheck,
        lipschitz: BoundCheck,
        gaps: Vec<f64>,
        pointwise_violation: bool,
    }

    let partials: Vec<Partial> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream(seed, StreamRole::Audit, 2, s as u64);
            let t = rng.random::<f64>() * p.horizon();
            let xbar: Vec<f64> = (0..dn).map(|_| 6.0 * rng.random::<f64>() - 3.0).collect();
            let scale = 10f64.powf(-3.0 * rng.random::<f64>());
            let zbar: Vec<f64> = xbar
                .iter()
                .map(|x| x + scale * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
            let a = p.control(rng.random_range(0..p.n_controls())).to_vec();
            let input = || format!("t={t:.6}, x={xbar:?}, z={zbar:?}, a={a:?}");

            let mut part = Partial {
                bound_f: BoundCheck::default(),
                bound_g: BoundCheck::default(),
                bound_b: BoundCheck::default(),
                consistency: BoundCheck::default(),
                lipschitz: BoundCheck::default(),
                gaps: vec![0.0; levels.len()],
                pointwise_violation: false,
            };
            let eval = |c: &dyn ParticleCoefficients, x: &[f64]| {
                let mut b = vec![0.0; dn];
                let mut f = vec![0.0; n];
                let mut g = vec![0.0; n];
                c.drift_and_cost(t, x, &a, &mut b, &mut f);
                c.terminal_costs(x, &mut g);
                (b, f, g)
            };
            let (bx, fx, gx) = eval(mc, &xbar);
            let (bz, fz, gz) = eval(mc, &zbar);
            let (rb, rf, rg) = eval(&raw, &xbar);
            let avg_dx: f64 = (0..n)
                .map(|j| dist(&xbar[j * d..(j + 1) * d], &zbar[j * d..(j + 1) * d]))
                .sum::<f64>()
                / n as f64;
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                part.bound_f.record(fx[i].abs(), k, BOUND_TOL, input);
                part.bound_g.record(gx[i].abs(), k, BOUND_TOL, input);
                let growth = k * (1.0 + mc.c_phi_rho * (mc.spec.m as f64).powf(-p.rho())
                    + norm(&xbar[r.clone()]).powf(p.rho()));
                part.bound_b.record(norm(&bx[r.clone()]), growth, BOUND_TOL, input);

                let rhs = mc.consistency_bound(i, t);
                let gap_b = dist(&bx[r.clone()], &rb[r.clone()]);
                let gap_f = (fx[i] - rf[i]).abs();
                let gap_g = (gx[i] - rg[i]).abs();
                part.consistency.record(gap_b.max(gap_f), rhs, BOUND_TOL, input);
                part.consistency.record(gap_g, mc.space_bound(i), BOUND_TOL, input);

                let lip_rhs = k * (dist(&xbar[r.clone()], &zbar[r.clone()]) + avg_dx);
                let lhs = dist(&bx[r.clone()], &bz[r.clone()])
                    .max((fx[i] - fz[i]).abs())
                    .max((gx[i] - gz[i]).abs());
                part.lipschitz.record(lhs, lip_rhs, BOUND_TOL, input);
            }
            for (l, lev) in levels.iter().enumerate() {
                let (b, f, g) = eval(lev, &xbar);
                let mut gap: f64 = 0.0;
                for i in 0..n {
                    let r = i * d..(i + 1) * d;
                    gap = gap
                        .max(dist(&b[r.clone()], &rb[r]))
                        .max((f[i] - rf[i]).abs())
                        .max((g[i] - rg[i]).abs());
                }
                part.gaps[l] = gap;
            }
            let (first, last) = (part.gaps[0], part.gaps[levels.len() - 1]);
            part.pointwise_violation = if first > ZERO_GAP { last >= first } else { last > ZERO_GAP };
            part
        })
        .collect();

    let mut bound_f = BoundCheck::default();
    let mut bound_g = BoundCheck::default();
    let mut bound_b = BoundCheck::default();
    let mut consistency = BoundCheck::default();
    let mut lipschitz = BoundCheck::default();
    let mut sup = vec![0.0f64; levels.len()];
    let mut pointwise = 0;
    for part in partials {
        bound_f.merge(part.bound_f);
        bound_g.merge(part.bound_g);
        bound_b.merge(part.bound_b);
        consistency.merge(part.consistency);
        lipschitz.merge(part.lipschitz);
        for (s, g) in sup.iter_mut().zip(&part.gaps) {
            *s = s.max(*g);
        }
        pointwise += part.pointwise_violation as usize;
    }
    let gap_sup_decreasing = sup
        .windows(2)
        .all(|w| if w[0] > ZERO_GAP { w[1] < w[0] } else { w[1] <= ZERO_GAP });
    let pass = bound_f.pass()
        && bound_g.pass()
        && bound_b.pass()
        && consistency.pass()
        && lipschitz.pass()
        && gap_sup_decreasing
        && pointwise == 0;
    Ok(MollifierReport {
        problem: p.name.clone(),
        n,
        m: mc.spec.m,
        c_phi_rho: mc.c_phi_rho,
        samples: n_samples,
        bound_f,
        bound_g,
        bound_b,
        consistency,
        lipschitz,
        gap_levels: GAP_LEVELS
            .iter()
            .zip(sup)
            .map(|(&m, sup_gap)| GapLevel { m, sup_gap })
            .collect(),
        pointwise_gap_violations: pointwise,
        gap_sup_decreasing,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::wasserstein_lp;
    use crate::problem::{benchmark, control_grid, FnCoefficients, ProblemConstants};
    use std::sync::Arc;

    fn problem(c: FnCoefficients) -> ProblemSpec {
        ProblemSpec::new(
            "test",
            1,
            1.0,
            control_grid(1, -1.0, 1.0, 3),
            Arc::new(c),
            ProblemConstants { k: 1.0, rho: 0.0, beta: 1.0 },
        )
        .unwrap()
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let rule = gauss_legendre(7);
        let w: f64 = rule.iter().map(|r| r.1).sum();
        assert!((w - 2.0).abs() < 1e-14);
        // Exact up to degree 13.
        let x12: f64 = rule.iter().map(|(x, w)| w * x.powi(12)).sum();
        assert!((x12 - 2.0 / 13.0).abs() < 1e-14);
    }

    #[test]
    fn kernel_rules_have_unit_mass() {
        for d in 1..=3 {
            let spec = MollifierSpec::new(8);
            let total: f64 = spec.space_rule(d).iter().map(|r| r.1).sum();
            assert!((total - 1.0).abs() < 1e-8);
            assert!(spec.space_rule(d).iter().all(|(p, _)| norm(p) < 1.0));
        }
        let dense = MollifierSpec::new(8).with_nodes(60);
        assert!((dense.raw_mass_ratio(1) - 1.0).abs() < 1e-6);
        assert!((dense.raw_mass_ratio(2) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn constant_terminal_cost_is_preserved() {
        let p = problem(FnCoefficients::new().terminal_cost(|_, _| 0.37));
        for (n, m) in [(1, 8), (2, 16), (3, 64)] {
            let mc = build_mollified(&p, n, MollifierSpec::new(m)).unwrap();
            let x: Vec<f64> = (0..n).map(|k| 0.3 * k as f64 - 0.2).collect();
            for i in 0..n {
                assert!((mc.g_i(i, &x) - 0.37).abs() < 1e-14);
            }
        }
    }

    /// Dense 1-D oracle: ∫ f(x − y/m) Φ(y) dy with 400 Gauss–Legendre nodes.
    fn dense_mollify(f: impl Fn(f64) -> f64, x: f64, m: f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for &(y, w) in dense_rule() {
            num += w * bump(y) * f(x - y / m);
            den += w * bump(y);
        }
        num / den
    }

    #[test]
    fn one_dimensional_mollification_matches_dense_oracle() {
        let p = problem(FnCoefficients::new().running_cost(|_, x, _, _| x[0].cos()));
        let mut prev_err = f64::INFINITY;
        for m in [8u32, 64] {
            let oracle = dense_mollify(f64::cos, 0.0, m as f64);
            // The default 7-node rule is within 2% of the smoothing effect;
            // a finer rule converges to the dense value.
            let coarse = build_mollified(&p, 1, MollifierSpec::new(m)).unwrap();
            let v = coarse.f_i(0, 0.5, &[0.0], &[0.0]);
            assert!((v - oracle).abs() < 0.02 * (1.0 - oracle), "m={m}: {v} vs {oracle}");
            let fine = build_mollified(&p, 1, MollifierSpec::new(m).with_nodes(40)).unwrap();
            let vf = fine.f_i(0, 0.5, &[0.0], &[0.0]);
            assert!((vf - oracle).abs() < 1e-10, "m={m}: {vf} vs {oracle}");
            let err = (v - 1.0).abs();
            assert!(err < prev_err);
            prev_err = err;
        }
    }

    #[test]
    fn size_cap_is_explicit() {
        let p = problem(FnCoefficients::new());
        let err = build_mollified(&p, 5, MollifierSpec::new(8)).unwrap_err();
        assert!(matches!(err, Error::QuadratureBudget(_)));
        let spec = MollifierSpec {
            mc_samples: Some(500),
            ..MollifierSpec::new(8)
        };
        assert!(build_mollified(&p, 5, spec).is_ok());
    }

    #[test]
    fn zero_coefficients_have_zero_slack() {
        let p = problem(FnCoefficients::new());
        let mc = build_mollified(&p, 2, MollifierSpec::new(8)).unwrap();
        let r = verify_mollifier_lemma(&mc, &p, 50, 1).unwrap();
        assert!(r.pass);
        assert_eq!(r.lipschitz.worst_ratio, 0.0);
        assert!(r.gap_levels.iter().all(|g| g.sup_gap == 0.0));
    }

    #[test]
    fn mean_reverting_consistency_at_fixed_point() {
        let p = benchmark("mean-reverting-mf").unwrap();
        let mc = build_mollified(&p, 2, MollifierSpec::new(16)).unwrap();
        let x = [0.4, -0.7];
        let a = [0.5];
        let mu = DiscreteMeasure::uniform_flat(1, x.to_vec()).unwrap();
        let exact = p.drift(0.3, &x[..1], &mu, &a)[0];
        let b1 = mc.b_i(0, 0.3, &x, &a)[0];
        assert!((b1 - exact).abs() <= mc.consistency_bound(0, 0.3));
    }

    #[test]
    fn decoupled_lipschitz_quotient() {
        let p = benchmark("decoupled-bounded").unwrap();
        let mc = build_mollified(&p, 1, MollifierSpec::new(16)).unwrap();
        let r = verify_mollifier_lemma(&mc, &p, 1000, 4).unwrap();
        assert!(r.lipschitz.pass());
        assert!(r.lipschitz.worst_ratio <= 1.0);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn exchangeability() {
        let p = benchmark("mean-reverting-mf").unwrap();
        let mc = build_mollified(&p, 3, MollifierSpec::new(8)).unwrap();
        let x = [0.1, -0.5, 1.2];
        let y = [1.2, 0.1, -0.5];
        let a = [-0.5];
        assert!((mc.b_i(0, 0.2, &x, &a)[0] - mc.b_i(1, 0.2, &y, &a)[0]).abs() < 1e-13);
        assert!((mc.f_i(2, 0.2, &x, &a) - mc.f_i(0, 0.2, &y, &a)).abs() < 1e-13);
        assert!((mc.g_i(1, &x) - mc.g_i(2, &y)).abs() < 1e-13);
    }

    #[test]
    fn finite_differences_stable_under_halving() {
        let p = benchmark("mean-reverting-mf").unwrap();
        let mc = build_mollified(&p, 2, MollifierSpec::new(8)).unwrap();
        let a = [1.0];
        let x = [0.3, -0.4];
        let fd = |h: f64| {
            let up = mc.b_i(0, 0.1, &[x[0] + h, x[1]], &a)[0];
            let dn = mc.b_i(0, 0.1, &[x[0] - h, x[1]], &a)[0];
            (up - dn) / (2.0 * h)
        };
        let (d1, d2) = (fd(1e-3), fd(5e-4));
        assert!((d1 / d2 - 1.0).abs() < 0.05);
    }

    #[test]
    fn shift_identity_for_empirical_measures() {
        let mut rng = stream(5, StreamRole::Audit, 0, 0);
        for _ in 0..20 {
            let n = rng.random_range(1..6usize);
            let x: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let y: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>() - 0.5).collect();
            let shifted: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            let mu = DiscreteMeasure::uniform_flat(2, x).unwrap();
            let nu = DiscreteMeasure::uniform_flat(2, shifted).unwrap();
            let bound: f64 = (0..n).map(|j| norm(&y[2 * j..2 * j + 2])).sum::<f64>() / n as f64;
            assert!(wasserstein_lp(&mu, &nu, 1.0).unwrap() <= bound + 1e-12);
        }
    }
}
