//! Mean field control problem instances and sampling audits of the standing
//! regularity assumptions (Lipschitz/growth/boundedness of the coefficients,
//! and C^{1,2} bounds on the volatilities).

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{dist, norm, wasserstein, DiscreteMeasure};
use crate::rng::{stream, StreamRole};

/// Coefficients `(b, σ, σ⁰, f, g)` of a controlled McKean–Vlasov system.
///
/// Matrices are written row-major into `out` (length `d·d`). Implementations
/// must be pure; they are evaluated concurrently.
pub trait Coefficients: Send + Sync {
    fn drift(&self, t: f64, x: &[f64], mu: &DiscreteMeasure, a: &[f64], out: &mut [f64]);
    fn sigma(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);
    fn sigma0(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn running_cost(&self, t: f64, x: &[f64], mu: &DiscreteMeasure, a: &[f64]) -> f64;
    fn terminal_cost(&self, x: &[f64], mu: &DiscreteMeasure) -> f64;

    /// True when no coefficient depends on `t`. Lets the mollifier skip the
    /// time convolution, which integrates a constant to itself.
    fn time_homogeneous(&self) -> bool {
        false
    }
}

type DriftFn = dyn Fn(f64, &[f64], &DiscreteMeasure, &[f64], &mut [f64]) + Send + Sync;
type SigmaFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;
type Sigma0Fn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
type CostFn = dyn Fn(f64, &[f64], &DiscreteMeasure, &[f64]) -> f64 + Send + Sync;
type TerminalFn = dyn Fn(&[f64], &DiscreteMeasure) -> f64 + Send + Sync;

/// Closure-backed coefficients; every unset coefficient is identically zero.
#[derive(Clone, Default)]
pub struct FnCoefficients {
    drift: Option<Arc<DriftFn>>,
    sigma: Option<Arc<SigmaFn>>,
    sigma0: Option<Arc<Sigma0Fn>>,
    running: Option<Arc<CostFn>>,
    terminal: Option<Arc<TerminalFn>>,
    time_homogeneous: bool,
}

impl FnCoefficients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn drift(
        mut self,
        f: impl Fn(f64, &[f64], &DiscreteMeasure, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn sigma(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.sigma = Some(Arc::new(f));
        self
    }

    pub fn sigma0(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.sigma0 = Some(Arc::new(f));
        self
    }

    pub fn running_cost(
        mut self,
        f: impl Fn(f64, &[f64], &DiscreteMeasure, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.running = Some(Arc::new(f));
        self
    }

    pub fn terminal_cost(
        mut self,
        f: impl Fn(&[f64], &DiscreteMeasure) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.terminal = Some(Arc::new(f));
        self
    }

    pub fn time_homogeneous(mut self, yes: bool) -> Self {
        self.time_homogeneous = yes;
        self
    }
}

impl Coefficients for FnCoefficients {
    fn drift(&self, t: f64, x: &[f64], mu: &DiscreteMeasure, a: &[f64], out: &mut [f64]) {
        match &self.drift {
            Some(f) => f(t, x, mu, a, out),
            None => out.fill(0.0),
        }
    }

    fn sigma(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        match &self.sigma {
            Some(f) => f(t, x, a, out),
            None => out.fill(0.0),
        }
    }

    fn sigma0(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.sigma0 {
            Some(f) => f(t, x, out),
            None => out.fill(0.0),
        }
    }

    fn running_cost(&self, t: f64, x: &[f64], mu: &DiscreteMeasure, a: &[f64]) -> f64 {
        self.running.as_ref().map_or(0.0, |f| f(t, x, mu, a))
    }

    fn terminal_cost(&self, x: &[f64], mu: &DiscreteMeasure) -> f64 {
        self.terminal.as_ref().map_or(0.0, |f| f(x, mu))
    }

    fn time_homogeneous(&self) -> bool {
        self.time_homogeneous
    }
}

/// Replaces the running and/or terminal cost of an existing model.
struct CostOverride {
    base: Arc<dyn Coefficients>,
    running: Option<Arc<CostFn>>,
    terminal: Option<Arc<TerminalFn>>,
}

impl Coefficients for CostOverride {
    fn drift(&self, t: f64, x: &[f64], mu: &DiscreteMeasure, a: &[f64], out: &mut [f64]) {
        self.base.drift(t, x, mu, a, out)
    }

    fn sigma(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        self.base.sigma(t, x, a, out)
    }

    fn sigma0(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.base.sigma0(t, x, out)
    }

    fn running_cost(&self, t: f64, x: &[f64], mu: &DiscreteMeasure, a: &[f64]) -> f64 {
        match &self.running {
            Some(f) => f(t, x, mu, a),
            None => self.base.running_cost(t, x, mu, a),
        }
    }

    fn terminal_cost(&self, x: &[f64], mu: &DiscreteMeasure) -> f64 {
        match &self.terminal {
            Some(f) => f(x, mu),
            None => self.base.terminal_cost(x, mu),
        }
    }

    fn time_homogeneous(&self) -> bool {
        // A replacement cost may depend on time.
        false
    }
}

/// A mean field control problem: coefficients, a finite control grid and the
/// constants `(K, ρ, β)` of the Lipschitz/growth assumptions.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    dim: usize,
    horizon: f64,
    controls: Vec<f64>,
    coefficients: Arc<dyn Coefficients>,
    k: f64,
    rho: f64,
    beta: f64,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("n_controls", &self.n_controls())
            .field("k", &self.k)
            .field("rho", &self.rho)
            .field("beta", &self.beta)
            .finish()
    }
}

/// Constants carried by a problem instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub k: f64,
    pub rho: f64,
    pub beta: f64,
}

impl ProblemSpec {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        horizon: f64,
        controls: Vec<Vec<f64>>,
        coefficients: Arc<dyn Coefficients>,
        constants: ProblemConstants,
    ) -> Result<Self> {
        let invalid = |invariant, detail: String| Err(Error::InvalidProblem { invariant, detail });
        if dim == 0 {
            return invalid("d > 0", "dimension is zero".into());
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return invalid("T > 0", format!("horizon {horizon}"));
        }
        if controls.is_empty() {
            return invalid("A nonempty", "empty control set".into());
        }
        let ProblemConstants { k, rho, beta } = constants;
        if !(k >= 0.0 && k.is_finite()) {
            return invalid("K >= 0", format!("K = {k}"));
        }
        if !(0.0..1.0).contains(&rho) {
            return invalid("rho in [0,1)", format!("rho = {rho}"));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return invalid("beta in (0,1]", format!("beta = {beta}"));
        }
        let mut flat = Vec::with_capacity(controls.len() * dim);
        for (i, a) in controls.iter().enumerate() {
            if a.len() != dim {
                return invalid(
                    "A subset of R^d",
                    format!("control {i} has dimension {}", a.len()),
                );
            }
            flat.extend_from_slice(a);
        }
        Ok(Self {
            name: name.into(),
            dim,
            horizon,
            controls: flat,
            coefficients,
            k,
            rho,
            beta,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn constants(&self) -> ProblemConstants {
        ProblemConstants {
            k: self.k,
            rho: self.rho,
            beta: self.beta,
        }
    }

    pub fn n_controls(&self) -> usize {
        self.controls.len() / self.dim
    }

    pub fn control(&self, i: usize) -> &[f64] {
        &self.controls[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coefficients(&self) -> &Arc<dyn Coefficients> {
        &self.coefficients
    }

    /// Upper bound `(1 + T) K` on any value function of the problem.
    pub fn value_bound(&self) -> f64 {
        (1.0 + self.horizon) * self.k
    }

    pub fn drift(&self, t: f64, x: &[f64], mu: &DiscreteMeasure, a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.coefficients.drift(t, x, mu, a, &mut out);
        out
    }

    pub fn sigma(&self, t: f64, x: &[f64], a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.coefficients.sigma(t, x, a, &mut out);
        out
    }

    pub fn sigma0(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.coefficients.sigma0(t, x, &mut out);
        out
    }

    pub fn running_cost(&self, t: f64, x: &[f64], mu: &DiscreteMeasure, a: &[f64]) -> f64 {
        self.coefficients.running_cost(t, x, mu, a)
    }

    pub fn terminal_cost(&self, x: &[f64], mu: &DiscreteMeasure) -> f64 {
        self.coefficients.terminal_cost(x, mu)
    }

    pub fn with_controls(mut self, controls: Vec<Vec<f64>>) -> Result<Self> {
        let c = self.constants();
        let coeffs = self.coefficients.clone();
        self = Self::new(self.name, self.dim, self.horizon, controls, coeffs, c)?;
        Ok(self)
    }

    pub fn with_constants(self, constants: ProblemConstants) -> Result<Self> {
        let controls = (0..self.n_controls()).map(|i| self.control(i).to_vec()).collect();
        Self::new(
            self.name,
            self.dim,
            self.horizon,
            controls,
            self.coefficients,
            constants,
        )
    }

    pub fn with_horizon(self, horizon: f64) -> Result<Self> {
        let controls = (0..self.n_controls()).map(|i| self.control(i).to_vec()).collect();
        let c = self.constants();
        Self::new(self.name, self.dim, horizon, controls, self.coefficients, c)
    }

    /// Same dynamics with the running cost replaced.
    pub fn with_running_cost(
        mut self,
        f: impl Fn(f64, &[f64], &DiscreteMeasure, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.coefficients = Arc::new(CostOverride {
            base: self.coefficients.clone(),
            running: Some(Arc::new(f)),
            terminal: None,
        });
        self
    }

    /// Same dynamics with the terminal cost replaced.
    pub fn with_terminal_cost(
        mut self,
        g: impl Fn(&[f64], &DiscreteMeasure) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.coefficients = Arc::new(CostOverride {
            base: self.coefficients.clone(),
            running: None,
            terminal: Some(Arc::new(g)),
        });
        self
    }

    /// Samples `(t, x, a)` and two random measures; true if `b`, `f` or `g`
    /// changes with the measure argument anywhere on the sample.
    pub fn probe_measure_dependence(&self, seed: u64, n_samples: usize) -> bool {
        let d = self.dim;
        (0..n_samples).any(|s| {
            let mut rng = stream(seed, StreamRole::Audit, 99, s as u64);
            let t = rng.random::<f64>() * self.horizon;
            let x: Vec<f64> = (0..d).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
            let a = self.control(rng.random_range(0..self.n_controls())).to_vec();
            let mu = random_measure(&mut rng, d, 3.0);
            let nu = random_measure(&mut rng, d, 3.0);
            let b1 = self.drift(t, &x, &mu, &a);
            let b2 = self.drift(t, &x, &nu, &a);
            b1 != b2
                || self.running_cost(t, &x, &mu, &a) != self.running_cost(t, &x, &nu, &a)
                || self.terminal_cost(&x, &mu) != self.terminal_cost(&x, &nu)
        })
    }

    /// True if `σ⁰` vanishes on a random sample of `(t, x)`.
    pub fn probe_no_common_noise(&self, seed: u64, n_samples: usize) -> bool {
        (0..n_samples).all(|s| {
            let mut rng = stream(seed, StreamRole::Audit, 98, s as u64);
            let t = rng.random::<f64>() * self.horizon;
            let x: Vec<f64> = (0..self.dim).map(|_| 8.0 * rng.random::<f64>() - 4.0).collect();
            self.sigma0(t, &x).iter().all(|v| *v == 0.0)
        })
    }
}

/// Evenly spaced control grid on `[lo, hi]^d` (per coordinate), `count` points
/// per axis.
pub fn control_grid(dim: usize, lo: f64, hi: f64, count: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = if count <= 1 {
        vec![0.5 * (lo + hi)]
    } else {
        (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect()
    };
    let mut out = vec![Vec::new()];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    out
}

// ---------------------------------------------------------------------------
// Benchmarks

pub const BENCHMARK_NAMES: [&str; 3] = ["decoupled-bounded", "mean-reverting-mf", "zero-cost"];
/// Default number of points in the control grid of every benchmark.
pub const BENCHMARK_CONTROLS: usize = 5;

/// `b = ½ a cos(πx/2)`, `σ = σ⁰ = 0`, `f = 0.2 cos x − 0.05 a²`,
/// `g = −½ min(||x| − 1|, 1)`. No measure dependence.
struct DecoupledBounded;

impl Coefficients for DecoupledBounded {
    fn drift(&self, _t: f64, x: &[f64], _mu: &DiscreteMeasure, a: &[f64], out: &mut [f64]) {
        out[0] = 0.5 * a[0] * (std::f64::consts::FRAC_PI_2 * x[0]).cos();
    }
    fn sigma(&self, _t: f64, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn sigma0(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn running_cost(&self, _t: f64, x: &[f64], _mu: &DiscreteMeasure, a: &[f64]) -> f64 {
        0.2 * x[0].cos() - 0.05 * a[0] * a[0]
    }
    fn terminal_cost(&self, x: &[f64], _mu: &DiscreteMeasure) -> f64 {
        -0.5 * (x[0].abs() - 1.0).abs().min(1.0)
    }
    fn time_homogeneous(&self) -> bool {
        true
    }
}

/// `b = ½ a + ½ tanh(m̄ − x)`, `σ = σ⁰ = 0.3`,
/// `f = 0.2 cos x + 0.1 sin m̄ − 0.05 a²`, `g = 0.3 cos x + 0.2 cos m̄`,
/// with `m̄` the mean of the measure argument.
struct MeanRevertingMf;

impl Coefficients for MeanRevertingMf {
    fn drift(&self, _t: f64, x: &[f64], mu: &DiscreteMeasure, a: &[f64], out: &mut [f64]) {
        out[0] = 0.5 * a[0] + 0.5 * (measure_mean_1d(mu) - x[0]).tanh();
    }
    fn sigma(&self, _t: f64, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out[0] = 0.3;
    }
    fn sigma0(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.3;
    }
    fn running_cost(&self, _t: f64, x: &[f64], mu: &DiscreteMeasure, a: &[f64]) -> f64 {
        0.2 * x[0].cos() + 0.1 * measure_mean_1d(mu).sin() - 0.05 * a[0] * a[0]
    }
    fn terminal_cost(&self, x: &[f64], mu: &DiscreteMeasure) -> f64 {
        0.3 * x[0].cos() + 0.2 * measure_mean_1d(mu).cos()
    }
    fn time_homogeneous(&self) -> bool {
        true
    }
}

fn measure_mean_1d(mu: &DiscreteMeasure) -> f64 {
    mu.iter().map(|(x, w)| w * x[0]).sum()
}

/// `b = ½ a`, `σ = σ⁰ = 0.2`, `f = g = 0`.
struct ZeroCost;

impl Coefficients for ZeroCost {
    fn drift(&self, _t: f64, _x: &[f64], _mu: &DiscreteMeasure, a: &[f64], out: &mut [f64]) {
        out[0] = 0.5 * a[0];
    }
    fn sigma(&self, _t: f64, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out[0] = 0.2;
    }
    fn sigma0(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.2;
    }
    fn running_cost(&self, _t: f64, _x: &[f64], _mu: &DiscreteMeasure, _a: &[f64]) -> f64 {
        0.0
    }
    fn terminal_cost(&self, _x: &[f64], _mu: &DiscreteMeasure) -> f64 {
        0.0
    }
    fn time_homogeneous(&self) -> bool {
        true
    }
}

/// Looks up a registered benchmark (`d = 1`, `T = 1`, five controls on
/// `[-1, 1]`). Constants are the hand-derived ones documented in the README.
pub fn benchmark(name: &str) -> Result<ProblemSpec> {
    let controls = control_grid(1, -1.0, 1.0, BENCHMARK_CONTROLS);
    let (coeffs, constants): (Arc<dyn Coefficients>, ProblemConstants) = match name {
        "decoupled-bounded" => (
            Arc::new(DecoupledBounded),
            ProblemConstants {
                k: 1.5,
                rho: 0.0,
                beta: 1.0,
            },
        ),
        "mean-reverting-mf" => (
            Arc::new(MeanRevertingMf),
            ProblemConstants {
                k: 1.6,
                rho: 0.5,
                beta: 1.0,
            },
        ),
        "zero-cost" => (
            Arc::new(ZeroCost),
            ProblemConstants {
                k: 1.0,
                rho: 0.0,
                beta: 1.0,
            },
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown benchmark `{other}` (known: {})",
                BENCHMARK_NAMES.join(", ")
            )))
        }
    };
    ProblemSpec::new(name, 1, 1.0, controls, coeffs, constants)
}

// ---------------------------------------------------------------------------
// Audits

/// Stated on every report: a sampled audit is evidence, not a proof.
pub const AUDIT_BANNER: &str = "sampling-based audit: a pass is evidence on the sampled inputs, not a proof; \
     joint continuity over (P2, W1) cannot be decided by sampling";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionResult {
    pub name: String,
    /// Worst observed quotient divided by `K` (0 when `K = 0` and the
    /// numerator vanishes, infinite when it does not).
    pub worst_ratio: f64,
    pub worst_input: String,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub banner: String,
    pub samples: usize,
    pub tolerance: f64,
    pub conditions: Vec<ConditionResult>,
    /// Inputs on which a coefficient panicked or returned a non-finite value.
    pub failures: Vec<String>,
}

impl AssumptionReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty() && self.conditions.iter().all(|c| c.pass)
    }

    pub fn condition(&self, name: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

/// Sampling ranges for the audits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AuditConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// States are drawn from `[-x_range, x_range]^d`.
    pub x_range: f64,
    pub tolerance: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            seed: 0,
            x_range: 10.0,
            tolerance: 1e-6,
        }
    }
}

fn random_measure<R: Rng>(rng: &mut R, d: usize, spread: f64) -> DiscreteMeasure {
    let atoms = rng.random_range(1..=4usize);
    let center: Vec<f64> = (0..d).map(|_| spread * (2.0 * rng.random::<f64>() - 1.0)).collect();
    let mut pts = Vec::with_capacity(atoms * d);
    for _ in 0..atoms {
        for c in &center {
            pts.push(c + rng.random::<f64>() * 2.0 - 1.0);
        }
    }
    let raw: Vec<f64> = (0..atoms).map(|_| 0.1 + rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    DiscreteMeasure::from_flat(d, pts, raw.iter().map(|w| w / s).collect())
        .expect("random measure is valid")
}

fn perturb_measure<R: Rng>(rng: &mut R, mu: &DiscreteMeasure, scale: f64) -> DiscreteMeasure {
    let pts: Vec<f64> = mu
        .points_flat()
        .iter()
        .map(|x| x + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DiscreteMeasure::from_flat(mu.dim(), pts, mu.weights().to_vec()).expect("perturbed measure")
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den <= 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

fn vnorm(v: &[f64]) -> f64 {
    norm(v)
}

fn vdiff(a: &[f64], b: &[f64]) -> f64 {
    dist(a, b)
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

struct SampleOutcome {
    ratios: Vec<f64>,
    input: String,
    failure: Option<String>,
}

fn reduce(names: &[&str], outcomes: Vec<SampleOutcome>, tol: f64, n: usize) -> AssumptionReport {
    let mut conditions: Vec<ConditionResult> = names
        .iter()
        .map(|n| ConditionResult {
            name: n.to_string(),
            worst_ratio: 0.0,
            worst_input: String::new(),
            pass: true,
        })
        .collect();
    let mut failures = Vec::new();
    for o in outcomes {
        if let Some(f) = o.failure {
            failures.push(f);
            continue;
        }
        for (c, r) in conditions.iter_mut().zip(o.ratios) {
            if r > c.worst_ratio {
                c.worst_ratio = r;
                c.worst_input = o.input.clone();
            }
        }
    }
    for c in conditions.iter_mut() {
        c.pass = c.worst_ratio <= 1.0 + tol;
    }
    AssumptionReport {
        banner: AUDIT_BANNER.to_string(),
        samples: n,
        tolerance: tol,
        conditions,
        failures,
    }
}

/// Audits the Lipschitz (1), growth (2) and boundedness (3) conditions of the
/// standing assumption on random inputs; measures are small random atom
/// clouds and the Lipschitz denominator is `|x−x′| + |t−t′|^β + W₁(μ,μ′)`.
pub fn audit_assumption_a(p: &ProblemSpec, cfg: &AuditConfig) -> AssumptionReport {
    let d = p.dim();
    let k = p.k();
    let names = ["lipschitz", "growth", "bounded_costs"];
    let outcomes: Vec<SampleOutcome> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream(cfg.seed, StreamRole::Audit, 0, s as u64);
            let t = rng.random::<f64>() * p.horizon();
            let x: Vec<f64> = (0..d)
                .map(|_| cfg.x_range * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
            let a = p.control(rng.random_range(0..p.n_controls())).to_vec();
            let mu = random_measure(&mut rng, d, cfg.x_range.min(5.0));
            // Half the pairs are local perturbations to probe small scales.
            let (t2, x2, mu2) = if rng.random::<bool>() {
                let h = 10f64.powf(-3.0 * rng.random::<f64>());
                let t2 = (t + h * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, p.horizon());
                let x2: Vec<f64> = x
                    .iter()
                    .map(|v| v + h * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                (t2, x2, perturb_measure(&mut rng, &mu, h))
            } else {
                let t2 = rng.random::<f64>() * p.horizon();
                let x2: Vec<f64> = (0..d)
                    .map(|_| cfg.x_range * (2.0 * rng.random::<f64>() - 1.0))
                    .collect();
                (t2, x2, random_measure(&mut rng, d, cfg.x_range.min(5.0)))
            };
            let input = format!("t={t:.6}, x={x:?}, a={a:?}, mu={:?}; t'={t2:.6}, x'={x2:?}", mu.points_flat());
            let eval = catch_unwind(AssertUnwindSafe(|| {
                let b1 = p.drift(t, &x, &mu, &a);
                let b2 = p.drift(t2, &x2, &mu2, &a);
                let s1 = p.sigma(t, &x, &a);
                let s2 = p.sigma(t2, &x2, &a);
                let z1 = p.sigma0(t, &x);
                let z2 = p.sigma0(t2, &x2);
                let f1 = p.running_cost(t, &x, &mu, &a);
                let f2 = p.running_cost(t2, &x2, &mu2, &a);
                let g1 = p.terminal_cost(&x, &mu);
                let g2 = p.terminal_cost(&x2, &mu2);
                (b1, b2, s1, s2, z1, z2, f1, f2, g1, g2)
            }));
            let Ok((b1, b2, s1, s2, z1, z2, f1, f2, g1, g2)) = eval else {
                return SampleOutcome {
                    ratios: vec![],
                    input: input.clone(),
                    failure: Some(format!("coefficient panicked at {input}")),
                };
            };
            if !(finite(&b1) && finite(&b2) && finite(&s1) && finite(&s2) && finite(&z1) && finite(&z2))
                || !(f1.is_finite() && f2.is_finite() && g1.is_finite() && g2.is_finite())
            {
                return SampleOutcome {
                    ratios: vec![],
                    input: input.clone(),
                    failure: Some(format!("non-finite coefficient at {input}")),
                };
            }
            let w1 = wasserstein(&mu, &mu2, 1.0).unwrap_or(f64::INFINITY);
            let lhs = vdiff(&b1, &b2)
                + vdiff(&s1, &s2)
                + vdiff(&z1, &z2)
                + (f1 - f2).abs()
                + (g1 - g2).abs();
            let den = vdiff(&x, &x2) + (t - t2).abs().powf(p.beta()) + w1;
            let lip = ratio(lhs, k * den);
            let growth = ratio(
                vnorm(&b1) + vnorm(&s1) + vnorm(&z1),
                k * (1.0 + vnorm(&x).powf(p.rho())),
            );
            let bounded = ratio(f1.abs() + g1.abs(), k);
            SampleOutcome {
                ratios: vec![lip, growth, bounded],
                input,
                failure: None,
            }
        })
        .collect();
    reduce(&names, outcomes, cfg.tolerance, cfg.n_samples)
}

/// Audits the derivative bound on `σ(·,·,a)` and `σ⁰` by central finite
/// differences: `|∂_t σ| + |∇_x σ| + |∇²_x σ| + (same for σ⁰) ≤ K`, with
/// Frobenius norms over all tensor components.
///
/// Besides the summed condition the report carries each of the six terms
/// separately (`d_t sigma`, ...), each divided by `K`.
pub fn audit_assumption_b(p: &ProblemSpec, fd_step: f64, cfg: &AuditConfig) -> Result<AssumptionReport> {
    if !(fd_step > 0.0) {
        return Err(Error::InvalidArgument(format!("fd_step must be positive (got {fd_step})")));
    }
    let d = p.dim();
    let k = p.k();
    let h = fd_step;
    let names = [
        "derivative_bound",
        "d_t sigma",
        "grad sigma",
        "hess sigma",
        "d_t sigma0",
        "grad sigma0",
        "hess sigma0",
    ];
    let outcomes: Vec<SampleOutcome> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream(cfg.seed, StreamRole::Audit, 1, s as u64);
            let t = h + rng.random::<f64>() * (p.horizon() - 2.0 * h).max(0.0);
            let x: Vec<f64> = (0..d)
                .map(|_| cfg.x_range * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
            let a = p.control(rng.random_range(0..p.n_controls())).to_vec();
            let input = format!("t={t:.6}, x={x:?}, a={a:?}");
            let eval = catch_unwind(AssertUnwindSafe(|| {
                let sig = |t: f64, x: &[f64]| p.sigma(t, x, &a);
                let sig0 = |t: f64, x: &[f64]| p.sigma0(t, x);
                let terms = |f: &dyn Fn(f64, &[f64]) -> Vec<f64>| -> [f64; 3] {
                    let base = f(t, &x);
                    let dt: Vec<f64> = f(t + h, &x)
                        .iter()
                        .zip(f(t - h, &x))
                        .map(|(u, v)| (u - v) / (2.0 * h))
                        .collect();
                    let mut grad_sq = 0.0;
                    let mut hess_sq = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            let shifted = |si: f64, sj: f64| {
                                let mut y = x.clone();
                                y[i] += si;
                                y[j] += sj;
                                f(t, &y)
                            };
                            if i == j {
                                let up = shifted(h, 0.0);
                                let dn = shifted(-h, 0.0);
                                for c in 0..base.len() {
                                    let g = (up[c] - dn[c]) / (2.0 * h);
                                    grad_sq += g * g;
                                    let hh = (up[c] - 2.0 * base[c] + dn[c]) / (h * h);
                                    hess_sq += hh * hh;
                                }
                            } else {
                                let pp = shifted(h, h);
                                let pm = shifted(h, -h);
                                let mp = shifted(-h, h);
                                let mm = shifted(-h, -h);
                                for c in 0..base.len() {
                                    let hh = (pp[c] - pm[c] - mp[c] + mm[c]) / (4.0 * h * h);
                                    hess_sq += hh * hh;
                                }
                            }
                        }
                    }
                    [vnorm(&dt), grad_sq.sqrt(), hess_sq.sqrt()]
                };
                let a1 = terms(&sig);
                let a2 = terms(&sig0);
                [a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]]
            }));
            match eval {
                Ok(parts) if parts.iter().all(|v| v.is_finite()) => {
                    let total: f64 = parts.iter().sum();
                    let mut ratios = vec![ratio(total, k)];
                    ratios.extend(parts.iter().map(|v| ratio(*v, k)));
                    SampleOutcome {
                        ratios,
                        input,
                        failure: None,
                    }
                }
                Ok(_) => SampleOutcome {
                    ratios: vec![],
                    input: input.clone(),
                    failure: Some(format!("non-finite derivative estimate at {input}")),
                },
                Err(_) => SampleOutcome {
                    ratios: vec![],
                    input: input.clone(),
                    failure: Some(format!("coefficient panicked at {input}")),
                },
            }
        })
        .collect();
    Ok(reduce(&names, outcomes, cfg.tolerance, cfg.n_samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_problem(k: f64, rho: f64) -> ProblemSpec {
        ProblemSpec::new(
            "zero",
            1,
            1.0,
            control_grid(1, -1.0, 1.0, 3),
            Arc::new(FnCoefficients::new()),
            ProblemConstants { k, rho, beta: 1.0 },
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_constants() {
        let c = Arc::new(FnCoefficients::new());
        let err = ProblemSpec::new(
            "x",
            1,
            1.0,
            vec![vec![0.0]],
            c.clone(),
            ProblemConstants {
                k: 1.0,
                rho: 1.0,
                beta: 1.0,
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("rho in [0,1)"));
        assert!(ProblemSpec::new(
            "x",
            1,
            1.0,
            vec![],
            c.clone(),
            ProblemConstants { k: 1.0, rho: 0.0, beta: 1.0 }
        )
        .is_err());
        assert!(ProblemSpec::new(
            "x",
            1,
            0.0,
            vec![vec![0.0]],
            c.clone(),
            ProblemConstants { k: 1.0, rho: 0.0, beta: 1.0 }
        )
        .is_err());
        assert!(ProblemSpec::new(
            "x",
            1,
            1.0,
            vec![vec![0.0]],
            c,
            ProblemConstants { k: 1.0, rho: 0.0, beta: 0.0 }
        )
        .is_err());
    }

    #[test]
    fn zero_coefficients_pass_with_zero_ratios() {
        let p = zero_problem(0.7, 0.0);
        let r = audit_assumption_a(&p, &AuditConfig { n_samples: 200, ..Default::default() });
        assert!(r.pass());
        assert!(r.conditions.iter().all(|c| c.worst_ratio == 0.0));
    }

    #[test]
    fn linear_drift_breaks_sublinear_growth() {
        let p = ProblemSpec::new(
            "linear",
            1,
            1.0,
            vec![vec![0.0]],
            Arc::new(FnCoefficients::new().drift(|_, x, _, _, out| out[0] = x[0])),
            ProblemConstants { k: 1.0, rho: 0.5, beta: 1.0 },
        )
        .unwrap();
        let r = audit_assumption_a(&p, &AuditConfig { n_samples: 300, ..Default::default() });
        let growth = r.condition("growth").unwrap();
        assert!(!growth.pass);
        assert!(growth.worst_ratio > 2.0);
    }

    #[test]
    fn audits_are_deterministic() {
        let p = benchmark("mean-reverting-mf").unwrap();
        let cfg = AuditConfig { n_samples: 100, seed: 3, ..Default::default() };
        let a = audit_assumption_a(&p, &cfg);
        let b = audit_assumption_a(&p, &cfg);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn panicking_coefficient_is_recorded() {
        let p = ProblemSpec::new(
            "boom",
            1,
            1.0,
            vec![vec![0.0]],
            Arc::new(FnCoefficients::new().terminal_cost(|x, _| {
                if x[0] > 9.0 {
                    panic!("out of domain")
                }
                0.0
            })),
            ProblemConstants { k: 1.0, rho: 0.0, beta: 1.0 },
        )
        .unwrap();
        let prev = std::panic::take_hook();
        std::panic::set_hook(Box::new(|_| {}));
        let r = audit_assumption_a(&p, &AuditConfig { n_samples: 200, ..Default::default() });
        std::panic::set_hook(prev);
        assert!(!r.failures.is_empty());
        assert!(!r.pass());
    }

    fn sigma_problem(f: impl Fn(f64) -> f64 + Send + Sync + 'static, k: f64) -> ProblemSpec {
        ProblemSpec::new(
            "sigma",
            1,
            1.0,
            vec![vec![0.0]],
            Arc::new(FnCoefficients::new().sigma(move |_, x, _, out| out[0] = f(x[0]))),
            ProblemConstants { k, rho: 0.0, beta: 1.0 },
        )
        .unwrap()
    }

    #[test]
    fn assumption_b_examples() {
        let cfg = AuditConfig { n_samples: 400, ..Default::default() };
        let constant = sigma_problem(|_| 0.7, 1.0);
        let r = audit_assumption_b(&constant, 1e-4, &cfg).unwrap();
        assert!(r.pass());
        assert!(r.conditions.iter().all(|c| c.worst_ratio == 0.0));

        // |cos| and |sin| are each below 1; their sum peaks at √2.
        let sine = sigma_problem(f64::sin, 1.0);
        let r = audit_assumption_b(&sine, 1e-4, &cfg).unwrap();
        for term in ["grad sigma", "hess sigma"] {
            assert!(r.condition(term).unwrap().worst_ratio <= 1.0 + 1e-6);
        }
        let summed = r.condition("derivative_bound").unwrap().worst_ratio;
        assert!(summed > 1.3 && summed <= std::f64::consts::SQRT_2 + 1e-6);
        let sine_sqrt2 = sigma_problem(f64::sin, std::f64::consts::SQRT_2);
        assert!(audit_assumption_b(&sine_sqrt2, 1e-4, &cfg).unwrap().pass());

        let square = sigma_problem(|x| x * x, 1.0);
        let r = audit_assumption_b(&square, 1e-4, &cfg).unwrap();
        assert!(!r.pass());
        assert!(audit_assumption_b(&square, 0.0, &cfg).is_err());
    }

    #[test]
    fn benchmarks_pass_both_audits() {
        for name in BENCHMARK_NAMES {
            let p = benchmark(name).unwrap();
            let cfg = AuditConfig { n_samples: 2000, seed: 11, ..Default::default() };
            let a = audit_assumption_a(&p, &cfg);
            assert!(a.pass(), "{name}: {a:?}");
            let b = audit_assumption_b(&p, 1e-4, &cfg).unwrap();
            assert!(b.pass(), "{name}");
        }
        assert!(benchmark("nope").is_err());
    }

    #[test]
    fn measure_dependence_probe() {
        assert!(!benchmark("decoupled-bounded").unwrap().probe_measure_dependence(1, 20));
        assert!(benchmark("mean-reverting-mf").unwrap().probe_measure_dependence(1, 20));
        assert!(benchmark("decoupled-bounded").unwrap().probe_no_common_noise(1, 20));
        assert!(!benchmark("zero-cost").unwrap().probe_no_common_noise(1, 20));
    }
}
