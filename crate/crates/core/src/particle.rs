//! Euler–Maruyama simulation of the controlled mean field dynamics (with the
//! conditional law approximated by idiosyncratic copies inside each common
//! noise path) and of the smoothed n-particle system.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{norm, DiscreteMeasure};
use crate::mollify::{MollifiedCoefficients, ParticleCoefficients};
use crate::problem::ProblemSpec;
use crate::rng::{stream, StreamRole};

/// Piecewise-constant feedback `(t, x, μ) → action index` tabulated on a
/// time lattice and a box lattice.
///
/// The lookup key is `x`, followed by the mean of `μ` when the table has
/// `2d` spatial axes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackTable {
    pub times: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
    /// Action indices, time-major then row-major over the spatial axes.
    pub actions: Vec<usize>,
}

impl FeedbackTable {
    pub fn new(times: Vec<f64>, lo: Vec<f64>, hi: Vec<f64>, nodes: Vec<usize>, actions: Vec<usize>) -> Result<Self> {
        let cells: usize = nodes.iter().product();
        if times.is_empty() || lo.len() != nodes.len() || hi.len() != nodes.len() {
            return Err(Error::InvalidArgument("inconsistent feedback table axes".into()));
        }
        if actions.len() != cells * times.len() {
            return Err(Error::InvalidArgument(format!(
                "feedback table has {} entries, expected {}",
                actions.len(),
                cells * times.len()
            )));
        }
        if nodes.iter().any(|&k| k < 2) {
            return Err(Error::InvalidArgument("feedback table axes need ≥ 2 nodes".into()));
        }
        Ok(Self {
            times,
            lo,
            hi,
            nodes,
            actions,
        })
    }

    fn time_index(&self, t: f64) -> usize {
        // Last slice with times[k] ≤ t.
        match self.times.iter().rposition(|&s| s <= t + 1e-12) {
            Some(k) => k,
            None => 0,
        }
    }

    pub fn lookup(&self, t: f64, x: &[f64], mu: &DiscreteMeasure) -> usize {
        let d = x.len();
        let mut key: Vec<f64> = x.to_vec();
        if self.nodes.len() == 2 * d {
            key.extend(mu.mean());
        }
        let mut flat = 0usize;
        for (ax, &v) in key.iter().enumerate().take(self.nodes.len()) {
            let k = self.nodes[ax];
            let h = (self.hi[ax] - self.lo[ax]) / (k - 1) as f64;
            let j = ((v - self.lo[ax]) / h).round().clamp(0.0, (k - 1) as f64) as usize;
            flat = flat * k + j;
        }
        let cells: usize = self.nodes.iter().product();
        self.actions[self.time_index(t) * cells + flat]
    }
}

/// Admissible controls: constant, tabulated feedback, or an open-loop
/// action per time step.
#[derive(Clone)]
pub enum ControlPolicy {
    Constant(usize),
    Feedback(Arc<FeedbackTable>),
    OpenLoop(Vec<usize>),
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

impl ControlPolicy {
    pub fn label(&self) -> String {
        match self {
            ControlPolicy::Constant(i) => format!("constant[{i}]"),
            ControlPolicy::Feedback(t) => format!("feedback[{} slices]", t.times.len()),
            ControlPolicy::OpenLoop(v) => format!("open-loop[{} steps]", v.len()),
        }
    }

    fn validate(&self, n_controls: usize, n_steps: usize) -> Result<()> {
        let bad = |i: usize| i >= n_controls;
        let ok = match self {
            ControlPolicy::Constant(i) => !bad(*i),
            ControlPolicy::Feedback(t) => !t.actions.iter().any(|&i| bad(i)),
            ControlPolicy::OpenLoop(v) => {
                if v.len() < n_steps {
                    return Err(Error::InvalidArgument(format!(
                        "open-loop table has {} steps, simulation needs {n_steps}",
                        v.len()
                    )));
                }
                !v.iter().any(|&i| bad(i))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "policy {} emits an action outside the {n_controls}-point control set",
                self.label()
            )))
        }
    }

    /// Index into the problem's control set.
    pub fn action(&self, step: usize, t: f64, x: &[f64], mu: &DiscreteMeasure) -> usize {
        match self {
            ControlPolicy::Constant(i) => *i,
            ControlPolicy::Feedback(table) => table.lookup(t, x, mu),
            ControlPolicy::OpenLoop(v) => v[step],
        }
    }
}

/// Brownian increments addressed by `(role, particle, scenario)`. Increments
/// are produced on demand from independent streams, so a bundle is a small
/// descriptor rather than a stored array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBundle {
    pub seed: u64,
    /// Root seed of the idiosyncratic streams (equal to `seed` unless
    /// overridden).
    pub idio_seed: u64,
    pub t0: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub dim: usize,
    pub n_particles: usize,
    pub n_scenarios: usize,
}

/// Outcome of the variance test on generated increments.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseCheck {
    pub draws: usize,
    /// Sample mean in units of its standard error.
    pub z_mean: f64,
    /// Sample variance minus Δt, in units of its standard error.
    pub z_var: f64,
    pub pass: bool,
}

impl NoiseBundle {
    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    /// A stream producing `n_steps · dim` increments in step order.
    pub fn increments(&self, role: StreamRole, particle: usize, scenario: usize) -> Increments {
        let root = match role {
            StreamRole::IdioW | StreamRole::IdioB => self.idio_seed,
            _ => self.seed,
        };
        Increments {
            rng: stream(root, role, particle as u64, scenario as u64),
            sd: self.dt().sqrt(),
        }
    }

    /// 3σ test of mean and variance over the common stream and the first
    /// particle's idiosyncratic streams of up to 64 scenarios.
    pub fn check(&self) -> NoiseCheck {
        let dt = self.dt();
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut count = 0usize;
        for s in 0..self.n_scenarios.min(64) {
            for role in [StreamRole::Common, StreamRole::IdioW, StreamRole::IdioB] {
                let mut inc = self.increments(role, 0, s);
                for _ in 0..self.n_steps * self.dim {
                    let v = inc.next_value();
                    sum += v;
                    sq += v * v;
                    count += 1;
                }
            }
        }
        let nf = count as f64;
        let mean = sum / nf;
        let var = sq / nf;
        let z_mean = mean / (dt / nf).sqrt();
        let z_var = (var - dt) / (dt * (2.0 / nf).sqrt());
        NoiseCheck {
            draws: count,
            z_mean,
            z_var,
            pass: z_mean.abs() <= 3.0 && z_var.abs() <= 3.0,
        }
    }
}

pub struct Increments {
    rng: ChaCha8Rng,
    sd: f64,
}

impl Increments {
    pub fn next_value(&mut self) -> f64 {
        self.sd * self.rng.sample::<f64, _>(StandardNormal)
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.next_value();
        }
    }
}

/// Simulated trajectories. States are stored scenario-major, then particle,
/// then coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathBundle {
    pub noise: NoiseBundle,
    pub policy: String,
    pub eps: f64,
    pub initial: Vec<f64>,
    pub terminal: Vec<f64>,
    /// `∫ f dt` per scenario, averaged over particles.
    pub running_cost: Vec<f64>,
    /// Average terminal cost per scenario.
    pub terminal_cost: Vec<f64>,
    /// `sup_k |X_k|²` per scenario and particle.
    pub sup_sq: Vec<f64>,
    /// `sup_k |X_k − X_0|²` per scenario and particle.
    pub sup_dev_sq: Vec<f64>,
    /// Full trajectories `[scenario][particle][step][coord]` when requested.
    pub paths: Option<Vec<f64>>,
    pub noise_check: NoiseCheck,
}

impl PathBundle {
    pub fn n_scenarios(&self) -> usize {
        self.noise.n_scenarios
    }

    pub fn n_particles(&self) -> usize {
        self.noise.n_particles
    }

    pub fn dim(&self) -> usize {
        self.noise.dim
    }

    fn idx(&self, s: usize, p: usize) -> usize {
        (s * self.n_particles() + p) * self.dim()
    }

    pub fn terminal_state(&self, s: usize, p: usize) -> &[f64] {
        let i = self.idx(s, p);
        &self.terminal[i..i + self.dim()]
    }

    /// Empirical law of the particles of scenario `s` at the horizon.
    pub fn terminal_empirical(&self, s: usize) -> DiscreteMeasure {
        let np = self.n_particles() * self.dim();
        DiscreteMeasure::uniform_flat(self.dim(), self.terminal[s * np..(s + 1) * np].to_vec())
            .expect("terminal states are finite")
    }

    pub fn path_state(&self, s: usize, p: usize, k: usize) -> Option<&[f64]> {
        let paths = self.paths.as_ref()?;
        let d = self.dim();
        let steps = self.noise.n_steps + 1;
        let i = ((s * self.n_particles() + p) * steps + k) * d;
        Some(&paths[i..i + d])
    }

    /// Empirical law of the particles of scenario `s` at step `k`.
    pub fn empirical_at(&self, s: usize, k: usize) -> Option<DiscreteMeasure> {
        let d = self.dim();
        let mut pts = Vec::with_capacity(self.n_particles() * d);
        for p in 0..self.n_particles() {
            pts.extend_from_slice(self.path_state(s, p, k)?);
        }
        DiscreteMeasure::uniform_flat(d, pts).ok()
    }

    /// Per-scenario payoff `running + terminal`.
    pub fn payoffs(&self) -> Vec<f64> {
        self.running_cost
            .iter()
            .zip(&self.terminal_cost)
            .map(|(a, b)| a + b)
            .collect()
    }

    /// CSV dump `(scenario, particle, step, x1, …)`; needs stored paths.
    pub fn to_csv(&self) -> Option<String> {
        self.paths.as_ref()?;
        let d = self.dim();
        let mut out = String::from("scenario,particle,step");
        for c in 1..=d {
            out.push_str(&format!(",x{c}"));
        }
        out.push('\n');
        for s in 0..self.n_scenarios() {
            for p in 0..self.n_particles() {
                for k in 0..=self.noise.n_steps {
                    out.push_str(&format!("{s},{p},{k}"));
                    for v in self.path_state(s, p, k)? {
                        out.push_str(&format!(",{v:?}"));
                    }
                    out.push('\n');
                }
            }
        }
        Some(out)
    }
}

/// How the idiosyncratic copies are initialized from the initial law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitSampling {
    /// Inverse-CDF at `(j + ½)/n`: the copies reproduce the atom weights as
    /// closely as `n` allows, identically in every scenario.
    Stratified,
    /// Independent draws per copy and scenario.
    Iid,
}

#[derive(Debug, Clone)]
pub struct MeanFieldConfig {
    pub t0: f64,
    pub eps: f64,
    pub n_copies: usize,
    pub n_common: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Replaces the idiosyncratic root seed while keeping the common one.
    pub idio_seed: Option<u64>,
    pub init: InitSampling,
    pub keep_paths: bool,
}

impl MeanFieldConfig {
    pub fn new(t0: f64, n_copies: usize, n_common: usize, n_steps: usize, seed: u64) -> Self {
        Self {
            t0,
            eps: 0.0,
            n_copies,
            n_common,
            n_steps,
            seed,
            idio_seed: None,
            init: InitSampling::Stratified,
            keep_paths: false,
        }
    }
}

struct ScenarioOut {
    initial: Vec<f64>,
    terminal: Vec<f64>,
    running: f64,
    terminal_cost: f64,
    sup_sq: Vec<f64>,
    sup_dev_sq: Vec<f64>,
    paths: Vec<f64>,
}

/// Accumulates a scenario's state across steps.
struct Tracker {
    d: usize,
    x0: Vec<f64>,
    sup_sq: Vec<f64>,
    sup_dev_sq: Vec<f64>,
    paths: Option<Vec<Vec<f64>>>,
}

impl Tracker {
    fn new(x0: &[f64], d: usize, keep: bool) -> Self {
        let np = x0.len() / d;
        let mut t = Self {
            d,
            x0: x0.to_vec(),
            sup_sq: vec![0.0; np],
            sup_dev_sq: vec![0.0; np],
            paths: keep.then(|| vec![Vec::new(); np]),
        };
        t.observe(x0);
        t
    }

    fn observe(&mut self, x: &[f64]) {
        let d = self.d;
        for p in 0..self.sup_sq.len() {
            let xp = &x[p * d..(p + 1) * d];
            let r2 = xp.iter().map(|v| v * v).sum::<f64>();
            let dev: f64 = xp
                .iter()
                .zip(&self.x0[p * d..(p + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            self.sup_sq[p] = self.sup_sq[p].max(r2);
            self.sup_dev_sq[p] = self.sup_dev_sq[p].max(dev);
            if let Some(paths) = self.paths.as_mut() {
                paths[p].extend_from_slice(xp);
            }
        }
    }
}

fn check_finite(x: &[f64], d: usize, step: usize, scenario: usize) -> Result<()> {
    if let Some(k) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step,
            scenario,
            particle: k / d,
        });
    }
    Ok(())
}

fn assemble(noise: NoiseBundle, policy: String, eps: f64, outs: Vec<ScenarioOut>, keep: bool) -> PathBundle {
    let mut b = PathBundle {
        noise,
        policy,
        eps,
        initial: Vec::new(),
        terminal: Vec::new(),
        running_cost: Vec::new(),
        terminal_cost: Vec::new(),
        sup_sq: Vec::new(),
        sup_dev_sq: Vec::new(),
        paths: keep.then(Vec::new),
        noise_check: noise.check(),
    };
    for o in outs {
        b.initial.extend(o.initial);
        b.terminal.extend(o.terminal);
        b.running_cost.push(o.running);
        b.terminal_cost.push(o.terminal_cost);
        b.sup_sq.extend(o.sup_sq);
        b.sup_dev_sq.extend(o.sup_dev_sq);
        if let Some(p) = b.paths.as_mut() {
            p.extend(o.paths);
        }
    }
    b
}

/// Euler–Maruyama for the (optionally ε-perturbed) mean field dynamics.
///
/// Within each common noise path the conditional law of the state is the
/// empirical law of `n_copies` copies driven by independent idiosyncratic
/// noise. Costs are averaged over copies.
pub fn simulate_mean_field(
    p: &ProblemSpec,
    init: &DiscreteMeasure,
    policy: &ControlPolicy,
    cfg: &MeanFieldConfig,
) -> Result<PathBundle> {
    let d = p.dim();
    if init.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: init.dim(),
        });
    }
    if !(cfg.t0 < p.horizon() && cfg.t0 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "start time {} must lie in [0, T)",
            cfg.t0
        )));
    }
    if cfg.n_steps == 0 || cfg.n_common == 0 || cfg.n_copies == 0 {
        return Err(Error::InvalidArgument("steps, scenarios and copies must be positive".into()));
    }
    if !(cfg.eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be ≥ 0 (got {})", cfg.eps)));
    }
    if cfg.n_copies < 2 && p.probe_measure_dependence(cfg.seed, 16) {
        return Err(Error::Config(
            "coefficients depend on the measure argument; n_copies must be ≥ 2".into(),
        ));
    }
    policy.validate(p.n_controls(), cfg.n_steps)?;
    let noise = NoiseBundle {
        seed: cfg.seed,
        idio_seed: cfg.idio_seed.unwrap_or(cfg.seed),
        t0: cfg.t0,
        horizon: p.horizon(),
        n_steps: cfg.n_steps,
        dim: d,
        n_particles: cfg.n_copies,
        n_scenarios: cfg.n_common,
    };
    let dt = noise.dt();
    let nc = cfg.n_copies;
    let coeffs = p.coefficients();
    let stratified = init.stratified_atoms(nc);

    let outs: Vec<ScenarioOut> = (0..cfg.n_common)
        .into_par_iter()
        .map(|s| -> Result<ScenarioOut> {
            let mut x = Vec::with_capacity(nc * d);
            match cfg.init {
                InitSampling::Stratified => {
                    for &k in &stratified {
                        x.extend_from_slice(init.point(k));
                    }
                }
                InitSampling::Iid => {
                    for c in 0..nc {
                        let mut rng = stream(cfg.seed, StreamRole::Init, c as u64, s as u64);
                        x.extend_from_slice(init.sample(&mut rng));
                    }
                }
            }
            let initial = x.clone();
            let mut w0 = noise.increments(StreamRole::Common, 0, s);
            let mut wi: Vec<Increments> = (0..nc).map(|c| noise.increments(StreamRole::IdioW, c, s)).collect();
            let mut bi: Vec<Increments> = (0..nc).map(|c| noise.increments(StreamRole::IdioB, c, s)).collect();
            let mut tracker = Tracker::new(&x, d, cfg.keep_paths);
            let mut mu = DiscreteMeasure::scratch_empirical(d, nc);
            let mut dw0 = vec![0.0; d];
            let mut dw = vec![0.0; d];
            let mut db = vec![0.0; d];
            let mut drift = vec![0.0; d];
            let mut sig = vec![0.0; d * d];
            let mut sig0 = vec![0.0; d * d];
            let mut running = 0.0;
            let mut next = x.clone();
            for k in 0..cfg.n_steps {
                let t = noise.time(k);
                mu.points_mut().copy_from_slice(&x);
                w0.fill(&mut dw0);
                for c in 0..nc {
                    let xc = &x[c * d..(c + 1) * d];
                    let a = p.control(policy.action(k, t, xc, &mu));
                    coeffs.drift(t, xc, &mu, a, &mut drift);
                    coeffs.sigma(t, xc, a, &mut sig);
                    coeffs.sigma0(t, xc, &mut sig0);
                    running += coeffs.running_cost(t, xc, &mu, a) * dt / nc as f64;
                    wi[c].fill(&mut dw);
                    bi[c].fill(&mut db);
                    for r in 0..d {
                        let mut v = xc[r] + drift[r] * dt + cfg.eps * db[r];
                        for q in 0..d {
                            v += sig[r * d + q] * dw[q] + sig0[r * d + q] * dw0[q];
                        }
                        next[c * d + r] = v;
                    }
                }
                std::mem::swap(&mut x, &mut next);
                check_finite(&x, d, k + 1, s)?;
                tracker.observe(&x);
            }
            mu.points_mut().copy_from_slice(&x);
            let terminal_cost = (0..nc)
                .map(|c| coeffs.terminal_cost(&x[c * d..(c + 1) * d], &mu))
                .sum::<f64>()
                / nc as f64;
            Ok(ScenarioOut {
                initial,
                terminal: x,
                running,
                terminal_cost,
                sup_sq: tracker.sup_sq,
                sup_dev_sq: tracker.sup_dev_sq,
                paths: tracker.paths.map(|v| v.concat()).unwrap_or_default(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(assemble(noise, policy.label(), cfg.eps, outs, cfg.keep_paths))
}

#[derive(Debug, Clone)]
pub struct ParticleConfig {
    pub t0: f64,
    pub eps: f64,
    pub n_scenarios: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub keep_paths: bool,
}

/// Euler–Maruyama for the n-particle system driven by `pc`: particle `i`
/// follows `policies[i]`, has its own `W^i`, `B^i` and shares `W⁰`.
/// Volatilities are the problem's own (never smoothed).
pub fn simulate_particles(
    pc: &dyn ParticleCoefficients,
    x0: &[f64],
    policies: &[ControlPolicy],
    cfg: &ParticleConfig,
) -> Result<PathBundle> {
    let p = pc.problem();
    let d = p.dim();
    let n = pc.n();
    if x0.len() != d * n {
        return Err(Error::DimensionMismatch {
            expected: d * n,
            got: x0.len(),
        });
    }
    if policies.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} policies for {n} particles",
            policies.len()
        )));
    }
    if !(cfg.t0 < p.horizon() && cfg.t0 >= 0.0) || cfg.n_steps == 0 || cfg.n_scenarios == 0 {
        return Err(Error::InvalidArgument("need t0 in [0, T), steps ≥ 1, scenarios ≥ 1".into()));
    }
    for pol in policies {
        pol.validate(p.n_controls(), cfg.n_steps)?;
    }
    let noise = NoiseBundle {
        seed: cfg.seed,
        idio_seed: cfg.seed,
        t0: cfg.t0,
        horizon: p.horizon(),
        n_steps: cfg.n_steps,
        dim: d,
        n_particles: n,
        n_scenarios: cfg.n_scenarios,
    };
    let dt = noise.dt();
    let coeffs = p.coefficients();
    let outs: Vec<ScenarioOut> = (0..cfg.n_scenarios)
        .into_par_iter()
        .map(|s| -> Result<ScenarioOut> {
            let mut x = x0.to_vec();
            let mut w0 = noise.increments(StreamRole::Common, 0, s);
            let mut wi: Vec<Increments> = (0..n).map(|i| noise.increments(StreamRole::IdioW, i, s)).collect();
            let mut bi: Vec<Increments> = (0..n).map(|i| noise.increments(StreamRole::IdioB, i, s)).collect();
            let mut tracker = Tracker::new(&x, d, cfg.keep_paths);
            let mut mu = DiscreteMeasure::scratch_empirical(d, n);
            let mut b_all = vec![0.0; d * n];
            let mut f_all = vec![0.0; n];
            let mut dw0 = vec![0.0; d];
            let mut dw = vec![0.0; d];
            let mut db = vec![0.0; d];
            let mut sig = vec![0.0; d * d];
            let mut sig0 = vec![0.0; d * d];
            let mut running = 0.0;
            let mut next = x.clone();
            let mut actions = vec![0usize; n];
            for k in 0..cfg.n_steps {
                let t = noise.time(k);
                mu.points_mut().copy_from_slice(&x);
                for i in 0..n {
                    actions[i] = policies[i].action(k, t, &x[i * d..(i + 1) * d], &mu);
                }
                w0.fill(&mut dw0);
                let mut drift = vec![0.0; d * n];
                let mut cost = vec![0.0; n];
                let mut done = vec![false; n];
                for i in 0..n {
                    if done[i] {
                        continue;
                    }
                    pc.drift_and_cost(t, &x, p.control(actions[i]), &mut b_all, &mut f_all);
                    for j in i..n {
                        if actions[j] == actions[i] {
                            drift[j * d..(j + 1) * d].copy_from_slice(&b_all[j * d..(j + 1) * d]);
                            cost[j] = f_all[j];
                            done[j] = true;
                        }
                    }
                }
                running += cost.iter().sum::<f64>() / n as f64 * dt;
                for i in 0..n {
                    let xi = &x[i * d..(i + 1) * d];
                    let a = p.control(actions[i]);
                    coeffs.sigma(t, xi, a, &mut sig);
                    coeffs.sigma0(t, xi, &mut sig0);
                    wi[i].fill(&mut dw);
                    bi[i].fill(&mut db);
                    for r in 0..d {
                        let mut v = xi[r] + drift[i * d + r] * dt + cfg.eps * db[r];
                        for q in 0..d {
                            v += sig[r * d + q] * dw[q] + sig0[r * d + q] * dw0[q];
                        }
                        next[i * d + r] = v;
                    }
                }
                std::mem::swap(&mut x, &mut next);
                check_finite(&x, d, k + 1, s)?;
                tracker.observe(&x);
            }
            let mut g = vec![0.0; n];
            pc.terminal_costs(&x, &mut g);
            Ok(ScenarioOut {
                initial: x0.to_vec(),
                terminal: x,
                running,
                terminal_cost: g.iter().sum::<f64>() / n as f64,
                sup_sq: tracker.sup_sq,
                sup_dev_sq: tracker.sup_dev_sq,
                paths: tracker.paths.map(|v| v.concat()).unwrap_or_default(),
            })
        })
        .collect::<Result<_>>()?;
    let label = policies.iter().map(|p| p.label()).collect::<Vec<_>>().join("|");
    Ok(assemble(noise, label, cfg.eps, outs, cfg.keep_paths))
}

/// [`simulate_particles`] with the smoothed coefficients.
pub fn simulate_mollified_particles(
    mc: &MollifiedCoefficients,
    x0: &[f64],
    policies: &[ControlPolicy],
    cfg: &ParticleConfig,
) -> Result<PathBundle> {
    simulate_particles(mc, x0, policies, cfg)
}

/// Settings of [`moment_bound_probe`].
#[derive(Debug, Clone)]
pub struct MomentProbeConfig {
    /// Initial laws `½δ_{−r} + ½δ_r` for each radius.
    pub radii: Vec<f64>,
    /// Window lengths for the time-increment bound.
    pub windows: Vec<f64>,
    /// Shift applied to the initial law for the stability bound.
    pub shift: f64,
    pub t0: f64,
    pub n_copies: usize,
    pub n_common: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub policy: ControlPolicy,
}

impl Default for MomentProbeConfig {
    fn default() -> Self {
        Self {
            radii: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            windows: vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0],
            shift: 0.25,
            t0: 0.0,
            n_copies: 32,
            n_common: 200,
            n_steps: 100,
            seed: 0,
            policy: ControlPolicy::Constant(0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentProbeReport {
    /// `(M₂(ξ), E sup|X|²)` per initial radius.
    pub second_moment: Vec<(f64, f64)>,
    /// Smallest `C` with `E sup|X|² ≤ C(1 + M₂(ξ))` on the sample.
    pub second_moment_constant: f64,
    /// `E sup|X − X′|² / E|ξ − ξ′|²` under synchronous coupling.
    pub stability_constant: f64,
    /// `(h, E sup_{[t,t+h]} |X − ξ|²)` per window.
    pub increments: Vec<(f64, f64)>,
    /// Least-squares slope of the increment statistic against `h`.
    pub increment_slope: f64,
    /// Smallest `C` with the increment statistic `≤ C h`.
    pub increment_constant: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Estimates the three moment/stability/increment constants of the state
/// process by simulation and reports fitted constants (the bounds' true
/// constants are not explicit).
pub fn moment_bound_probe(p: &ProblemSpec, cfg: &MomentProbeConfig) -> Result<MomentProbeReport> {
    let d = p.dim();
    let two_point = |r: f64| -> Result<DiscreteMeasure> {
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        a[0] = -r;
        b[0] = r;
        DiscreteMeasure::new(d, &[a, b], vec![0.5, 0.5])
    };
    let mut sim = MeanFieldConfig::new(cfg.t0, cfg.n_copies, cfg.n_common, cfg.n_steps, cfg.seed);
    sim.init = InitSampling::Stratified;

    let mut second_moment = Vec::new();
    let mut c2: f64 = 0.0;
    for &r in &cfg.radii {
        let mu = two_point(r)?;
        let paths = simulate_mean_field(p, &mu, &cfg.policy, &sim)?;
        let m2 = r * r;
        let stat = mean(&paths.sup_sq);
        c2 = c2.max(stat / (1.0 + m2));
        second_moment.push((m2, stat));
    }

    let base = two_point(1.0)?;
    let shifted = DiscreteMeasure::from_flat(
        d,
        base.points_flat().iter().enumerate().map(|(k, v)| if k % d == 0 { v + cfg.shift } else { *v }).collect(),
        base.weights().to_vec(),
    )?;
    let mut keep = sim.clone();
    keep.keep_paths = true;
    let pa = simulate_mean_field(p, &base, &cfg.policy, &keep)?;
    let pb = simulate_mean_field(p, &shifted, &cfg.policy, &keep)?;
    let mut sup_diff = Vec::with_capacity(cfg.n_common * cfg.n_copies);
    for s in 0..cfg.n_common {
        for c in 0..cfg.n_copies {
            let mut best: f64 = 0.0;
            for k in 0..=cfg.n_steps {
                let (x, y) = (pa.path_state(s, c, k).unwrap(), pb.path_state(s, c, k).unwrap());
                let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                best = best.max(norm(&diff).powi(2));
            }
            sup_diff.push(best);
        }
    }
    let stability_constant = mean(&sup_diff) / (cfg.shift * cfg.shift);

    let mut increments = Vec::new();
    let mut ci: f64 = 0.0;
    for &h in &cfg.windows {
        let steps = ((h / ((p.horizon() - cfg.t0) / cfg.n_steps as f64)).round() as usize).max(1);
        let mut window = MeanFieldConfig::new(cfg.t0, cfg.n_copies, cfg.n_common, steps, cfg.seed);
        window.init = InitSampling::Stratified;
        let short = p.clone().with_horizon(cfg.t0 + h)?;
        let paths = simulate_mean_field(&short, &base, &cfg.policy, &window)?;
        let stat = mean(&paths.sup_dev_sq);
        ci = ci.max(stat / h);
        increments.push((h, stat));
    }
    let (sx, sy): (f64, f64) = increments.iter().fold((0.0, 0.0), |(a, b), (h, v)| (a + h, b + v));
    let k = increments.len() as f64;
    let (mx, my) = (sx / k, sy / k);
    let (mut num, mut den) = (0.0, 0.0);
    for (h, v) in &increments {
        num += (h - mx) * (v - my);
        den += (h - mx) * (h - mx);
    }
    Ok(MomentProbeReport {
        second_moment,
        second_moment_constant: c2,
        stability_constant,
        increments,
        increment_slope: if den > 0.0 { num / den } else { 0.0 },
        increment_constant: ci,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::wasserstein_1d;
    use crate::mollify::{build_mollified, MollifierSpec};
    use crate::problem::{benchmark, control_grid, FnCoefficients, ProblemConstants};

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

    fn common_noise_only() -> ProblemSpec {
        problem(FnCoefficients::new().sigma0(|_, _, out| out[0] = 1.0))
    }

    #[test]
    fn frozen_dynamics_keep_initial_state() {
        let p = problem(FnCoefficients::new());
        let mu = DiscreteMeasure::new(1, &[vec![-1.0], vec![2.0]], vec![0.3, 0.7]).unwrap();
        let cfg = MeanFieldConfig::new(0.2, 10, 3, 20, 1);
        let b = simulate_mean_field(&p, &mu, &ControlPolicy::Constant(1), &cfg).unwrap();
        assert_eq!(b.initial, b.terminal);
        assert!(b.sup_dev_sq.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn common_noise_moves_copies_together() {
        let p = common_noise_only();
        let mu = DiscreteMeasure::dirac(&[0.0]);
        let cfg = MeanFieldConfig::new(0.25, 4, 10_000, 10, 2);
        let b = simulate_mean_field(&p, &mu, &ControlPolicy::Constant(0), &cfg).unwrap();
        for s in 0..20 {
            let x0 = b.terminal_state(s, 0)[0];
            for c in 1..4 {
                assert_eq!(b.terminal_state(s, c)[0], x0);
            }
        }
        let xs: Vec<f64> = (0..10_000).map(|s| b.terminal_state(s, 0)[0]).collect();
        let m = mean(&xs);
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        // Var of a sample variance of normals: 2σ⁴/(N−1).
        let se = 0.75 * (2.0 / 9999.0f64).sqrt();
        assert!((var - 0.75).abs() < 3.0 * se, "var {var}");
        assert!(b.noise_check.draws > 0);
    }

    #[test]
    fn identical_seeds_are_bitwise_identical() {
        let p = benchmark("mean-reverting-mf").unwrap();
        let mu = DiscreteMeasure::new(1, &[vec![-1.0], vec![1.0]], vec![0.5, 0.5]).unwrap();
        let mut cfg = MeanFieldConfig::new(0.0, 8, 16, 25, 9);
        cfg.eps = 0.1;
        cfg.keep_paths = true;
        let a = simulate_mean_field(&p, &mu, &ControlPolicy::Constant(3), &cfg).unwrap();
        let b = simulate_mean_field(&p, &mu, &ControlPolicy::Constant(3), &cfg).unwrap();
        assert_eq!(a.paths, b.paths);
        assert_eq!(a.running_cost, b.running_cost);
    }

    #[test]
    fn more_scenarios_keep_earlier_streams() {
        let p = benchmark("zero-cost").unwrap();
        let mu = DiscreteMeasure::dirac(&[0.3]);
        let small = simulate_mean_field(&p, &mu, &ControlPolicy::Constant(4), &MeanFieldConfig::new(0.0, 3, 5, 10, 4)).unwrap();
        let large = simulate_mean_field(&p, &mu, &ControlPolicy::Constant(4), &MeanFieldConfig::new(0.0, 3, 9, 10, 4)).unwrap();
        assert_eq!(small.terminal[..], large.terminal[..small.terminal.len()]);
    }

    #[test]
    fn copies_required_for_measure_dependence() {
        let p = benchmark("mean-reverting-mf").unwrap();
        let mu = DiscreteMeasure::dirac(&[0.0]);
        let err = simulate_mean_field(&p, &mu, &ControlPolicy::Constant(0), &MeanFieldConfig::new(0.0, 1, 2, 5, 0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let p = problem(FnCoefficients::new().drift(|_, x, _, _, out| out[0] = x[0] * x[0] * 1e3));
        let mu = DiscreteMeasure::dirac(&[10.0]);
        let err = simulate_mean_field(&p, &mu, &ControlPolicy::Constant(0), &MeanFieldConfig::new(0.0, 1, 1, 50, 0));
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn policy_actions_must_lie_in_control_set() {
        let p = benchmark("zero-cost").unwrap();
        let mu = DiscreteMeasure::dirac(&[0.0]);
        let cfg = MeanFieldConfig::new(0.0, 2, 1, 4, 0);
        assert!(simulate_mean_field(&p, &mu, &ControlPolicy::Constant(9), &cfg).is_err());
        assert!(simulate_mean_field(&p, &mu, &ControlPolicy::OpenLoop(vec![0, 1]), &cfg).is_err());
        assert!(simulate_mean_field(&p, &mu, &ControlPolicy::OpenLoop(vec![0, 1, 2, 3]), &cfg).is_ok());
    }

    #[test]
    fn idiosyncratic_perturbation_is_gaussian_and_independent() {
        let p = problem(FnCoefficients::new());
        let mc = build_mollified(&p, 2, MollifierSpec::new(8)).unwrap();
        let cfg = ParticleConfig {
            t0: 0.5,
            eps: 1.0,
            n_scenarios: 20_000,
            n_steps: 5,
            seed: 3,
            keep_paths: false,
        };
        let pol = vec![ControlPolicy::Constant(0); 2];
        let b = simulate_mollified_particles(&mc, &[1.0, -1.0], &pol, &cfg).unwrap();
        let n = cfg.n_scenarios as f64;
        let d1: Vec<f64> = (0..cfg.n_scenarios).map(|s| b.terminal_state(s, 0)[0] - 1.0).collect();
        let d2: Vec<f64> = (0..cfg.n_scenarios).map(|s| b.terminal_state(s, 1)[0] + 1.0).collect();
        let v1 = d1.iter().map(|x| x * x).sum::<f64>() / n;
        let cov = d1.iter().zip(&d2).map(|(a, b)| a * b).sum::<f64>() / n;
        assert!((v1 - 0.5).abs() < 3.0 * 0.5 * (2.0 / n).sqrt());
        assert!(cov.abs() < 3.0 * 0.5 / n.sqrt());
        // Fourth moment of a normal: 3σ⁴.
        let k4 = d1.iter().map(|x| x.powi(4)).sum::<f64>() / n;
        assert!((k4 / (v1 * v1) - 3.0).abs() < 0.15);
    }

    #[test]
    fn shared_common_noise_correlates_particles() {
        let p = common_noise_only();
        let mc = build_mollified(&p, 2, MollifierSpec::new(8)).unwrap();
        let cfg = ParticleConfig {
            t0: 0.0,
            eps: 0.0,
            n_scenarios: 200,
            n_steps: 10,
            seed: 1,
            keep_paths: false,
        };
        let pol = vec![ControlPolicy::Constant(0); 2];
        let b = simulate_mollified_particles(&mc, &[0.0, 0.0], &pol, &cfg).unwrap();
        for s in 0..200 {
            assert_eq!(b.terminal_state(s, 0), b.terminal_state(s, 1));
        }
    }

    #[test]
    fn common_noise_consistency_under_idiosyncratic_reseeding() {
        // With σ = 0.2 idiosyncratic noise, the per-path empirical mean
        // depends on the common path only up to O(σ/√copies).
        let p = benchmark("zero-cost").unwrap();
        let mu = DiscreteMeasure::new(1, &[vec![-1.0], vec![1.0]], vec![0.5, 0.5]).unwrap();
        let mut cfg = MeanFieldConfig::new(0.0, 400, 5, 20, 0);
        let a = simulate_mean_field(&p, &mu, &ControlPolicy::Constant(2), &cfg).unwrap();
        cfg.idio_seed = Some(77);
        let b = simulate_mean_field(&p, &mu, &ControlPolicy::Constant(2), &cfg).unwrap();
        // Difference of two independent means of 400 N(·, 0.04) copies.
        let se = 0.2 * (2.0 / 400.0f64).sqrt();
        let mut common_spread: f64 = 0.0;
        for s in 0..5 {
            let ma = a.terminal_empirical(s).mean()[0];
            let mb = b.terminal_empirical(s).mean()[0];
            assert!((ma - mb).abs() < 4.0 * se);
            common_spread = common_spread.max((ma - a.terminal_empirical(0).mean()[0]).abs());
        }
        assert!(common_spread > 4.0 * se, "common noise should separate paths");
    }

    #[test]
    fn measure_flow_is_half_holder() {
        // Idiosyncratic noise only: W₂ between the empirical laws at s and
        // s + h scales like √h.
        let p = problem(FnCoefficients::new().sigma(|_, _, _, out| out[0] = 1.0));
        let mu = DiscreteMeasure::new(1, &[vec![-1.0], vec![1.0]], vec![0.5, 0.5]).unwrap();
        let mut cfg = MeanFieldConfig::new(0.0, 2000, 1, 256, 5);
        cfg.keep_paths = true;
        let b = simulate_mean_field(&p, &mu, &ControlPolicy::Constant(0), &cfg).unwrap();
        // Couple each copy with itself (synchronous coupling bounds W₂).
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for j in 4..=8 {
            let h = 256 >> j;
            let mut sup: f64 = 0.0;
            for start in (0..256 - h).step_by(h.max(1) * 4) {
                let w: f64 = (0..2000)
                    .map(|c| {
                        let a = b.path_state(0, c, start).unwrap()[0];
                        let e = b.path_state(0, c, start + h).unwrap()[0];
                        (a - e).powi(2)
                    })
                    .sum::<f64>()
                    / 2000.0;
                sup = sup.max(w.sqrt());
            }
            xs.push((h as f64 / 256.0).ln());
            ys.push(sup.ln());
        }
        let (mx, my) = (mean(&xs), mean(&ys));
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((0.4..=0.6).contains(&slope), "slope {slope}");
        // Sanity: the coupling distance dominates W₂ of the marginals.
        let m1 = b.empirical_at(0, 0).unwrap();
        let m2 = b.empirical_at(0, 16).unwrap();
        assert!(wasserstein_1d(&m1, &m2, 2.0).unwrap() <= (16.0f64 / 256.0).sqrt() * 1.2);
    }

    #[test]
    fn moment_probe_on_frozen_and_pure_noise() {
        let frozen = problem(FnCoefficients::new());
        let cfg = MomentProbeConfig {
            n_common: 4,
            n_copies: 4,
            ..Default::default()
        };
        let r = moment_bound_probe(&frozen, &cfg).unwrap();
        assert_eq!(r.stability_constant, 1.0);
        assert!(r.increments.iter().all(|(_, v)| *v == 0.0));

        let cfg = MomentProbeConfig {
            n_common: 4000,
            n_copies: 2,
            n_steps: 256,
            ..Default::default()
        };
        let r = moment_bound_probe(&common_noise_only(), &cfg).unwrap();
        // E sup_{[0,h]} |W|² = c·h with c ≈ 4 ln 2·… for sampled sups; only
        // the linear shape is asserted.
        for (h, v) in &r.increments {
            assert!(v / h > 1.0 && v / h < 4.0, "{h} {v}");
        }
        assert!(r.stability_constant <= 1.0 + 1e-12);
    }

    #[test]
    fn benchmark_moment_constants_are_stable() {
        let p = benchmark("decoupled-bounded").unwrap();
        let coarse = MomentProbeConfig {
            n_common: 2,
            n_copies: 8,
            n_steps: 50,
            policy: ControlPolicy::Constant(4),
            ..Default::default()
        };
        let fine = MomentProbeConfig { n_steps: 100, ..coarse.clone() };
        let a = moment_bound_probe(&p, &coarse).unwrap();
        let b = moment_bound_probe(&p, &fine).unwrap();
        assert!(a.stability_constant.is_finite());
        assert!((a.stability_constant / b.stability_constant - 1.0).abs() < 0.1);
        assert!(a.second_moment_constant < 10.0);
    }
}
