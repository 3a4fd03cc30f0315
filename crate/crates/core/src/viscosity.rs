//! Numerical probes of the measure-derivative calculus, the HJB equation on
//! measures, the dynamic programming principle, Itô's formula along the
//! measure flow, and the moment-penalized comparison argument.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bellman::ValueGrid;
use crate::error::{Error, Result};
use crate::lift::{h_n, lift, q0, LiftEstimator};
use crate::measure::{moment, wasserstein_1d, DiscreteMeasure};
use crate::particle::{simulate_mean_field, ControlPolicy, MeanFieldConfig};
use crate::problem::ProblemSpec;
use crate::rng::{stream, StreamRole};

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type OuterScalar = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
type OuterVector = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// `φ: ℝ^d → ℝ` with closed-form gradient and Hessian (row-major).
#[derive(Clone)]
pub struct InnerFn {
    pub value: ScalarFn,
    pub grad: VectorFn,
    pub hess: VectorFn,
}

/// `F(t, z)` with closed-form `∂_t F`, gradient and Hessian in `z`.
#[derive(Clone)]
pub struct OuterFn {
    pub value: OuterScalar,
    pub dt: OuterScalar,
    pub grad: OuterVector,
    pub hess: OuterVector,
}

/// `u(t, μ) = F(t, ∫φ₁dμ, …, ∫φ_k dμ)`.
#[derive(Clone)]
pub struct CylindricalFunctional {
    pub name: String,
    pub dim: usize,
    pub inner: Vec<InnerFn>,
    pub outer: OuterFn,
    /// `C` in `|∂_μ u(t, μ)(x)| ≤ C (1 + |x|)`.
    pub growth: f64,
}

impl std::fmt::Debug for CylindricalFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CylindricalFunctional")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("k", &self.inner.len())
            .finish()
    }
}

impl CylindricalFunctional {
    pub fn k(&self) -> usize {
        self.inner.len()
    }

    fn moments(&self, mu: &DiscreteMeasure) -> Vec<f64> {
        self.inner
            .iter()
            .map(|phi| mu.iter().map(|(x, w)| w * (phi.value)(x)).sum())
            .collect()
    }

    fn outer_grad(&self, t: f64, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.k()];
        (self.outer.grad)(t, z, &mut g);
        g
    }

    pub fn value(&self, t: f64, mu: &DiscreteMeasure) -> f64 {
        (self.outer.value)(t, &self.moments(mu))
    }

    pub fn d_t(&self, t: f64, mu: &DiscreteMeasure) -> f64 {
        (self.outer.dt)(t, &self.moments(mu))
    }

    /// `∂_μ u(t, μ)(x) = Σ_j ∂_{z_j}F ∇φ_j(x)`.
    pub fn d_mu(&self, t: f64, mu: &DiscreteMeasure, x: &[f64]) -> Vec<f64> {
        let g = self.outer_grad(t, &self.moments(mu));
        self.d_mu_with(&g, x)
    }

    fn d_mu_with(&self, g: &[f64], x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        let mut grad = vec![0.0; d];
        for (j, phi) in self.inner.iter().enumerate() {
            (phi.grad)(x, &mut grad);
            for r in 0..d {
                out[r] += g[j] * grad[r];
            }
        }
        out
    }

    /// `∇_x ∂_μ u(t, μ)(x) = Σ_j ∂_{z_j}F ∇²φ_j(x)`, row-major `d × d`.
    pub fn dx_d_mu(&self, t: f64, mu: &DiscreteMeasure, x: &[f64]) -> Vec<f64> {
        let g = self.outer_grad(t, &self.moments(mu));
        self.dx_d_mu_with(&g, x)
    }

    fn dx_d_mu_with(&self, g: &[f64], x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        let mut h = vec![0.0; d * d];
        for (j, phi) in self.inner.iter().enumerate() {
            (phi.hess)(x, &mut h);
            for (o, hv) in out.iter_mut().zip(&h) {
                *o += g[j] * hv;
            }
        }
        out
    }

    /// `∂²_μ u(t, μ)(x, y) = Σ_{j,l} ∂²_{z_j z_l}F ∇φ_j(x) ∇φ_l(y)ᵀ`.
    pub fn d2_mu(&self, t: f64, mu: &DiscreteMeasure, x: &[f64], y: &[f64]) -> Vec<f64> {
        let z = self.moments(mu);
        let k = self.k();
        let mut hz = vec![0.0; k * k];
        (self.outer.hess)(t, &z, &mut hz);
        self.d2_mu_with(&hz, x, y)
    }

    fn d2_mu_with(&self, hz: &[f64], x: &[f64], y: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let k = self.k();
        let gx: Vec<Vec<f64>> = self.inner.iter().map(|p| grad_of(p, x, d)).collect();
        let gy: Vec<Vec<f64>> = self.inner.iter().map(|p| grad_of(p, y, d)).collect();
        let mut out = vec![0.0; d * d];
        for j in 0..k {
            for l in 0..k {
                let c = hz[j * k + l];
                if c == 0.0 {
                    continue;
                }
                for r in 0..d {
                    for s in 0..d {
                        out[r * d + s] += c * gx[j][r] * gy[l][s];
                    }
                }
            }
        }
        out
    }

    /// `M₂(μ) = ∫|x|² dμ`.
    pub fn second_moment(dim: usize) -> Self {
        Self {
            name: "second-moment".into(),
            dim,
            inner: vec![InnerFn {
                value: Arc::new(|x| x.iter().map(|v| v * v).sum()),
                grad: Arc::new(|x, o| {
                    for (oi, xi) in o.iter_mut().zip(x) {
                        *oi = 2.0 * xi;
                    }
                }),
                hess: Arc::new(move |_, o| {
                    o.fill(0.0);
                    for r in 0..dim {
                        o[r * dim + r] = 2.0;
                    }
                }),
            }],
            outer: linear_outer(),
            growth: 2.0,
        }
    }

    /// `|∫x dμ|²`.
    pub fn squared_mean(dim: usize) -> Self {
        let inner = (0..dim)
            .map(|c| InnerFn {
                value: Arc::new(move |x: &[f64]| x[c]),
                grad: Arc::new(move |_, o: &mut [f64]| {
                    o.fill(0.0);
                    o[c] = 1.0;
                }),
                hess: Arc::new(|_, o: &mut [f64]| o.fill(0.0)),
            })
            .collect();
        Self {
            name: "squared-mean".into(),
            dim,
            inner,
            outer: OuterFn {
                value: Arc::new(|_, z| z.iter().map(|v| v * v).sum()),
                dt: Arc::new(|_, _| 0.0),
                grad: Arc::new(|_, z, o| {
                    for (oi, zi) in o.iter_mut().zip(z) {
                        *oi = 2.0 * zi;
                    }
                }),
                hess: Arc::new(move |_, _, o| {
                    o.fill(0.0);
                    for r in 0..dim {
                        o[r * dim + r] = 2.0;
                    }
                }),
            },
            // |2 m| ≤ 2 ∫|y| dμ, bounded on the unit-radius test family.
            growth: 2.0,
        }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self {
            name: "constant".into(),
            dim,
            inner: vec![InnerFn {
                value: Arc::new(|_| 0.0),
                grad: Arc::new(|_, o| o.fill(0.0)),
                hess: Arc::new(|_, o| o.fill(0.0)),
            }],
            outer: OuterFn {
                value: Arc::new(move |_, _| c),
                dt: Arc::new(|_, _| 0.0),
                grad: Arc::new(|_, _, o| o.fill(0.0)),
                hess: Arc::new(|_, _, o| o.fill(0.0)),
            },
            growth: 0.0,
        }
    }

    /// `u(t, μ) = T − t`.
    pub fn time_to_go(dim: usize, horizon: f64) -> Self {
        let mut u = Self::constant(dim, 0.0);
        u.name = "time-to-go".into();
        u.outer.value = Arc::new(move |t, _| horizon - t);
        u.outer.dt = Arc::new(|_, _| -1.0);
        u
    }

    /// `F(t, z) = e^{-t} sin(z₁) z₂ + z₁²/2` with `φ₁ = Σ cos x_r`,
    /// `φ₂ = ½ log(1 + |x|²)`.
    pub fn mixed(dim: usize) -> Self {
        let phi1 = InnerFn {
            value: Arc::new(|x| x.iter().map(|v| v.cos()).sum()),
            grad: Arc::new(|x, o| {
                for (oi, xi) in o.iter_mut().zip(x) {
                    *oi = -xi.sin();
                }
            }),
            hess: Arc::new(move |x, o| {
                o.fill(0.0);
                for r in 0..dim {
                    o[r * dim + r] = -x[r].cos();
                }
            }),
        };
        let phi2 = InnerFn {
            value: Arc::new(|x| 0.5 * (1.0 + x.iter().map(|v| v * v).sum::<f64>()).ln()),
            grad: Arc::new(|x, o| {
                let s = 1.0 + x.iter().map(|v| v * v).sum::<f64>();
                for (oi, xi) in o.iter_mut().zip(x) {
                    *oi = xi / s;
                }
            }),
            hess: Arc::new(move |x, o| {
                let s = 1.0 + x.iter().map(|v| v * v).sum::<f64>();
                for r in 0..dim {
                    for c in 0..dim {
                        let delta = if r == c { 1.0 } else { 0.0 };
                        o[r * dim + c] = delta / s - 2.0 * x[r] * x[c] / (s * s);
                    }
                }
            }),
        };
        Self {
            name: "mixed".into(),
            dim,
            inner: vec![phi1, phi2],
            outer: OuterFn {
                value: Arc::new(|t, z| (-t).exp() * z[0].sin() * z[1] + 0.5 * z[0] * z[0]),
                dt: Arc::new(|t, z| -(-t).exp() * z[0].sin() * z[1]),
                grad: Arc::new(|t, z, o| {
                    let e = (-t).exp();
                    o[0] = e * z[0].cos() * z[1] + z[0];
                    o[1] = e * z[0].sin();
                }),
                hess: Arc::new(|t, z, o| {
                    let e = (-t).exp();
                    o[0] = -e * z[0].sin() * z[1] + 1.0;
                    o[1] = e * z[0].cos();
                    o[2] = o[1];
                    o[3] = 0.0;
                }),
            },
            growth: 4.0 * dim as f64,
        }
    }

    /// The functionals used by the derivative checks.
    pub fn catalog(dim: usize, horizon: f64) -> Vec<Self> {
        vec![
            Self::second_moment(dim),
            Self::squared_mean(dim),
            Self::constant(dim, 1.5),
            Self::time_to_go(dim, horizon),
            Self::mixed(dim),
        ]
    }
}

fn grad_of(p: &InnerFn, x: &[f64], d: usize) -> Vec<f64> {
    let mut g = vec![0.0; d];
    (p.grad)(x, &mut g);
    g
}

fn linear_outer() -> OuterFn {
    OuterFn {
        value: Arc::new(|_, z| z[0]),
        dt: Arc::new(|_, _| 0.0),
        grad: Arc::new(|_, _, o| o[0] = 1.0),
        hess: Arc::new(|_, _, o| o[0] = 0.0),
    }
}

/// Default relative tolerance of the derivative checks.
pub const L_DERIVATIVE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivativeMismatch {
    pub atom: usize,
    /// Second atom for Hessian entries.
    pub other: Option<usize>,
    pub coord: usize,
    pub finite_difference: f64,
    pub closed_form: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LDerivativeReport {
    pub functional: String,
    pub atoms: usize,
    pub fd_step: f64,
    /// `max |fd − closed| / max(1, |closed|)` over first derivatives.
    pub first_order_error: f64,
    /// Same over the atom-coordinate Hessian.
    pub second_order_error: f64,
    pub tolerance: f64,
    pub mismatches: Vec<DerivativeMismatch>,
    pub pass: bool,
}

fn rel_err(fd: f64, cf: f64) -> f64 {
    (fd - cf).abs() / cf.abs().max(1.0)
}

/// Compares the closed-form measure derivatives against central
/// differences of the atom-coordinate lift `U(x_1, …, x_K) = u(t, Σ w_k δ_{x_k})`:
/// `∂U/∂x_k = w_k ∂_μu(x_k)` and
/// `∂²U/∂x_k∂x_l = w_k w_l ∂²_μu(x_k, x_l) + 1{k=l} w_k ∇_x∂_μu(x_k)`.
pub fn l_derivative_fd_check(
    u: &CylindricalFunctional,
    t: f64,
    mu: &DiscreteMeasure,
    fd_step: f64,
    tolerance: f64,
) -> Result<LDerivativeReport> {
    if !(fd_step > 0.0) {
        return Err(Error::InvalidArgument(format!("fd_step must be positive (got {fd_step})")));
    }
    let d = u.dim;
    if mu.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: mu.dim(),
        });
    }
    let atoms = mu.len();
    let w = mu.weights().to_vec();
    let base = mu.points_flat().to_vec();
    let value_at = |pts: &[f64]| -> f64 {
        let z: Vec<f64> = u
            .inner
            .iter()
            .map(|phi| (0..atoms).map(|k| w[k] * (phi.value)(&pts[k * d..(k + 1) * d])).sum())
            .collect();
        (u.outer.value)(t, &z)
    };
    // Closed-form gradient of U, used for the Hessian differences.
    let grad_at = |pts: &[f64]| -> Vec<f64> {
        let z: Vec<f64> = u
            .inner
            .iter()
            .map(|phi| (0..atoms).map(|k| w[k] * (phi.value)(&pts[k * d..(k + 1) * d])).sum())
            .collect();
        let g = u.outer_grad(t, &z);
        let mut out = Vec::with_capacity(atoms * d);
        for k in 0..atoms {
            out.extend(u.d_mu_with(&g, &pts[k * d..(k + 1) * d]).into_iter().map(|v| w[k] * v));
        }
        out
    };
    let mut mismatches = Vec::new();
    let mut first: f64 = 0.0;
    let cf_grad = grad_at(&base);
    for k in 0..atoms {
        for r in 0..d {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[k * d + r] += fd_step;
            minus[k * d + r] -= fd_step;
            let fd = (value_at(&plus) - value_at(&minus)) / (2.0 * fd_step);
            let cf = cf_grad[k * d + r];
            let e = rel_err(fd, cf);
            first = first.max(e);
            if e > tolerance {
                mismatches.push(DerivativeMismatch {
                    atom: k,
                    other: None,
                    coord: r,
                    finite_difference: fd,
                    closed_form: cf,
                });
            }
        }
    }
    let z = u.moments(mu);
    let kk = u.k();
    let mut hz = vec![0.0; kk * kk];
    (u.outer.hess)(t, &z, &mut hz);
    let g = u.outer_grad(t, &z);
    let mut second: f64 = 0.0;
    for l in 0..atoms {
        for s in 0..d {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[l * d + s] += fd_step;
            minus[l * d + s] -= fd_step;
            let gp = grad_at(&plus);
            let gm = grad_at(&minus);
            for k in 0..atoms {
                let xk = &base[k * d..(k + 1) * d];
                let xl = &base[l * d..(l + 1) * d];
                let cross = u.d2_mu_with(&hz, xk, xl);
                let own = if k == l { Some(u.dx_d_mu_with(&g, xk)) } else { None };
                for r in 0..d {
                    let fd = (gp[k * d + r] - gm[k * d + r]) / (2.0 * fd_step);
                    let mut cf = w[k] * w[l] * cross[r * d + s];
                    if let Some(o) = &own {
                        cf += w[k] * o[r * d + s];
                    }
                    let e = rel_err(fd, cf);
                    second = second.max(e);
                    if e > tolerance {
                        mismatches.push(DerivativeMismatch {
                            atom: k,
                            other: Some(l),
                            coord: r * d + s,
                            finite_difference: fd,
                            closed_form: cf,
                        });
                    }
                }
            }
        }
    }
    Ok(LDerivativeReport {
        functional: u.name.clone(),
        atoms,
        fd_step,
        first_order_error: first,
        second_order_error: second,
        tolerance,
        pass: mismatches.is_empty(),
        mismatches,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityReport {
    pub atoms: usize,
    /// Atoms where an identity fails bitwise.
    pub failures: Vec<usize>,
    pub pass: bool,
}

/// `∂_μM₂(μ)(x) = 2x`, `∂²_μM₂ = 0`, `∇_x∂_μM₂ = 2I`, compared exactly.
pub fn second_moment_identities(mu: &DiscreteMeasure) -> IdentityReport {
    let d = mu.dim();
    let m2 = CylindricalFunctional::second_moment(d);
    let mut failures = Vec::new();
    for k in 0..mu.len() {
        let x = mu.point(k);
        let first_ok = m2.d_mu(0.0, mu, x).iter().zip(x).all(|(g, xi)| *g == 2.0 * xi);
        let hess = m2.dx_d_mu(0.0, mu, x);
        let hess_ok = (0..d).all(|r| (0..d).all(|c| hess[r * d + c] == if r == c { 2.0 } else { 0.0 }));
        let cross_ok = (0..mu.len()).all(|l| m2.d2_mu(0.0, mu, x, mu.point(l)).iter().all(|v| *v == 0.0));
        if !(first_ok && hess_ok && cross_ok) {
            failures.push(k);
        }
    }
    IdentityReport {
        atoms: mu.len(),
        pass: failures.is_empty(),
        failures,
    }
}

/// `tr[A Bᵀ M]` for row-major `d × d` matrices.
fn trace_abt_m(a: &[f64], b: &[f64], m: &[f64], d: usize) -> f64 {
    let mut s = 0.0;
    for r in 0..d {
        for c in 0..d {
            // (A Bᵀ)_{rc} M_{cr}
            let abt: f64 = (0..d).map(|q| a[r * d + q] * b[c * d + q]).sum();
            s += abt * m[c * d + r];
        }
    }
    s
}

/// Left-hand side of the HJB equation on measures evaluated at `(t, μ)`
/// for the test functional `u`, with the maximum over the finite control
/// set taken atom by atom.
pub fn hjb_residual(p: &ProblemSpec, u: &CylindricalFunctional, t: f64, mu: &DiscreteMeasure) -> Result<f64> {
    let d = p.dim();
    if u.dim != d || mu.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: mu.dim(),
        });
    }
    let z = u.moments(mu);
    let g = u.outer_grad(t, &z);
    let kk = u.k();
    let mut hz = vec![0.0; kk * kk];
    (u.outer.hess)(t, &z, &mut hz);
    let mut total = (u.outer.dt)(t, &z);
    let s0: Vec<Vec<f64>> = (0..mu.len()).map(|k| p.sigma0(t, mu.point(k))).collect();
    for (k, (x, w)) in mu.iter().enumerate() {
        let dmu = u.d_mu_with(&g, x);
        let dxdmu = u.dx_d_mu_with(&g, x);
        let common = 0.5 * trace_abt_m(&s0[k], &s0[k], &dxdmu, d);
        let best = (0..p.n_controls())
            .map(|a| {
                let act = p.control(a);
                let b = p.drift(t, x, mu, act);
                let sig = p.sigma(t, x, act);
                p.running_cost(t, x, mu, act)
                    + b.iter().zip(&dmu).map(|(bi, gi)| bi * gi).sum::<f64>()
                    + 0.5 * trace_abt_m(&sig, &sig, &dxdmu, d)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        total += w * (best + common);
    }
    let mut double = 0.0;
    for (k, (x, wx)) in mu.iter().enumerate() {
        for (l, (y, wy)) in mu.iter().enumerate() {
            let m = u.d2_mu_with(&hz, x, y);
            double += wx * wy * trace_abt_m(&s0[k], &s0[l], &m, d);
        }
    }
    Ok(total + 0.5 * double)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItoReport {
    pub functional: String,
    pub h: f64,
    pub paths: usize,
    pub copies: usize,
    /// `(E⁰[u(t+h, μ_{t+h})] − u(t, μ)) / h`.
    pub quotient: f64,
    pub std_error: f64,
    pub generator: f64,
    pub bias_budget: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Frozen-control one-step check of Itô's formula along the conditional
/// law. Each common path moves every atom by one Euler step; idiosyncratic
/// noise is represented by `copies` draws per atom.
#[allow(clippy::too_many_arguments)]
pub fn ito_generator_check(
    p: &ProblemSpec,
    u: &CylindricalFunctional,
    t: f64,
    mu: &DiscreteMeasure,
    action: usize,
    h: f64,
    paths: usize,
    copies: usize,
    bias_budget: f64,
    seed: u64,
) -> Result<ItoReport> {
    let d = p.dim();
    if action >= p.n_controls() {
        return Err(Error::InvalidArgument(format!("action index {action} out of range")));
    }
    if !(h > 0.0) || paths < 2 || copies == 0 {
        return Err(Error::InvalidArgument("need h > 0, ≥ 2 paths and ≥ 1 copy".into()));
    }
    let a = p.control(action);
    let z = u.moments(mu);
    let g = u.outer_grad(t, &z);
    let kk = u.k();
    let mut hz = vec![0.0; kk * kk];
    (u.outer.hess)(t, &z, &mut hz);
    let s0: Vec<Vec<f64>> = (0..mu.len()).map(|k| p.sigma0(t, mu.point(k))).collect();
    let mut generator = (u.outer.dt)(t, &z);
    for (k, (x, w)) in mu.iter().enumerate() {
        let dmu = u.d_mu_with(&g, x);
        let dxdmu = u.dx_d_mu_with(&g, x);
        let b = p.drift(t, x, mu, a);
        let sig = p.sigma(t, x, a);
        generator += w
            * (b.iter().zip(&dmu).map(|(bi, gi)| bi * gi).sum::<f64>()
                + 0.5 * trace_abt_m(&sig, &sig, &dxdmu, d)
                + 0.5 * trace_abt_m(&s0[k], &s0[k], &dxdmu, d));
    }
    for (k, (x, wx)) in mu.iter().enumerate() {
        for (l, (y, wy)) in mu.iter().enumerate() {
            generator += 0.5 * wx * wy * trace_abt_m(&s0[k], &s0[l], &u.d2_mu_with(&hz, x, y), d);
        }
    }
    let u0 = u.value(t, mu);
    let atoms = mu.len();
    let drifts: Vec<Vec<f64>> = (0..atoms).map(|k| p.drift(t, mu.point(k), mu, a)).collect();
    let sigmas: Vec<Vec<f64>> = (0..atoms).map(|k| p.sigma(t, mu.point(k), a)).collect();
    let sqh = h.sqrt();
    let diffs: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|s| -> Result<f64> {
            let mut rc = stream(seed, StreamRole::Common, 0, s as u64);
            let dw0: Vec<f64> = (0..d).map(|_| sqh * rc.sample::<f64, _>(StandardNormal)).collect();
            let mut pts = Vec::with_capacity(atoms * copies * d);
            let mut wts = Vec::with_capacity(atoms * copies);
            for k in 0..atoms {
                let x = mu.point(k);
                for c in 0..copies {
                    let mut ri = stream(seed, StreamRole::IdioW, (k * copies + c) as u64, s as u64);
                    let dw: Vec<f64> = (0..d).map(|_| sqh * ri.sample::<f64, _>(StandardNormal)).collect();
                    for r in 0..d {
                        let mut v = x[r] + drifts[k][r] * h;
                        for q in 0..d {
                            v += sigmas[k][r * d + q] * dw[q] + s0[k][r * d + q] * dw0[q];
                        }
                        pts.push(v);
                    }
                    wts.push(mu.weights()[k] / copies as f64);
                }
            }
            let nu = DiscreteMeasure::from_flat(d, pts, wts)?;
            Ok(u.value(t + h, &nu) - u0)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = paths as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let quotient = mean / h;
    let se = (var / n).sqrt() / h;
    let tolerance = 3.0 * se + bias_budget;
    Ok(ItoReport {
        functional: u.name.clone(),
        h,
        paths,
        copies,
        quotient,
        std_error: se,
        generator,
        bias_budget,
        tolerance,
        pass: (quotient - generator).abs() <= tolerance,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DppRow {
    pub policy: String,
    /// `E[∫_t^s f dr + v̂(s, μ_s)]`.
    pub rhs: f64,
    pub std_error: f64,
    /// `v̂(t, μ) − rhs`; nonnegative up to the tolerance.
    pub gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DppReport {
    pub t: f64,
    pub s: f64,
    pub lhs: f64,
    pub rows: Vec<DppRow>,
    pub grid_budget: f64,
    /// Smallest gap over the family, with its policy.
    pub best_policy: String,
    pub best_gap: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DppConfig {
    pub n_common: usize,
    pub n_copies: usize,
    /// Euler steps over `[t, s]`.
    pub n_steps: usize,
    pub seed: u64,
    /// Allowance for grid, mollification and particle-number error of `v̂`.
    pub grid_budget: f64,
}

/// One-sided dynamic programming check: the lifted grid value at `(t, μ)`
/// must dominate the simulated right-hand side of every policy in the
/// family up to `3·stderr + grid_budget`. Equality is not certifiable with
/// finite families; the best-policy gap is a diagnostic.
pub fn dpp_probe(
    p: &ProblemSpec,
    vg: &ValueGrid,
    t: f64,
    s: f64,
    mu: &DiscreteMeasure,
    policies: &[ControlPolicy],
    cfg: &DppConfig,
) -> Result<DppReport> {
    if !(s >= t && s <= p.horizon()) {
        return Err(Error::InvalidArgument(format!("need t ≤ s ≤ T (t = {t}, s = {s})")));
    }
    if policies.is_empty() {
        return Err(Error::InvalidArgument("empty policy family".into()));
    }
    let lhs = lift(vg, t, mu, LiftEstimator::Exact)?.value;
    let eps = vg.header.grid.eps;
    let mut rows = Vec::with_capacity(policies.len());
    for policy in policies {
        let (rhs, se) = if s == t {
            (lhs, 0.0)
        } else {
            let window = p.clone().with_horizon(s)?;
            let mut mf = MeanFieldConfig::new(t, cfg.n_copies, cfg.n_common, cfg.n_steps, cfg.seed);
            mf.eps = eps;
            let bundle = simulate_mean_field(&window, mu, policy, &mf)?;
            let samples: Vec<f64> = (0..cfg.n_common)
                .into_par_iter()
                .map(|sc| -> Result<f64> {
                    let law = bundle.terminal_empirical(sc);
                    let v = lift(vg, s, &law, LiftEstimator::default())?.value;
                    Ok(bundle.running_cost[sc] + v)
                })
                .collect::<Result<Vec<f64>>>()?;
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let var = if samples.len() > 1 {
                samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, (var / n).sqrt())
        };
        let tolerance = 3.0 * se + cfg.grid_budget;
        let gap = lhs - rhs;
        rows.push(DppRow {
            policy: policy.label(),
            rhs,
            std_error: se,
            gap,
            tolerance,
            pass: gap >= -tolerance,
        });
    }
    let best = rows
        .iter()
        .min_by(|a, b| a.gap.total_cmp(&b.gap))
        .expect("family is nonempty");
    Ok(DppReport {
        t,
        s,
        lhs,
        best_policy: best.policy.clone(),
        best_gap: best.gap,
        grid_budget: cfg.grid_budget,
        pass: rows.iter().all(|r| r.pass),
        rows,
    })
}

/// `l₀/3 + e^T (‖u₁‖_∞ + ℓ₂)`: the bound on `δ M₂` at penalized maximizers.
pub fn penalization_bound(l0: f64, horizon: f64, u1_sup: f64, ell2: f64) -> f64 {
    l0 / 3.0 + horizon.exp() * (u1_sup + ell2)
}

/// Largest `δ ∈ {1, ½, ¼, …}` (at most 60 halvings) with
/// `u₁(t₀, μ₀) − v̌(t₀, μ₀) − δ M₂(μ₀) ≥ l₀/2`.
pub fn select_delta(gap_at_base: f64, m2_at_base: f64, l0: f64) -> Option<f64> {
    let mut delta = 1.0;
    for _ in 0..=60 {
        if gap_at_base - delta * m2_at_base >= l0 / 2.0 {
            return Some(delta);
        }
        delta *= 0.5;
    }
    None
}

pub type MeasureFn<'a> = &'a (dyn Fn(f64, &DiscreteMeasure) -> f64 + Sync);

pub struct PenalizedSearch<'a> {
    pub delta: f64,
    pub l0: f64,
    pub horizon: f64,
    pub u1: MeasureFn<'a>,
    pub v_check: MeasureFn<'a>,
    /// `‖u₁‖_∞`.
    pub u1_sup: f64,
    /// `ℓ₂ = (1 + T) K`.
    pub ell2: f64,
    pub family: Vec<(f64, DiscreteMeasure)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenalizedGap {
    pub delta: f64,
    pub bound: f64,
    /// Family members rejected at intake because `δ M₂ > bound`.
    pub rejected: Vec<usize>,
    pub searched: usize,
    pub argmax: usize,
    pub t: f64,
    pub mu: DiscreteMeasure,
    /// `u₁ − v̌ − δ M₂` at the maximizer.
    pub value: f64,
    pub m2: f64,
    pub certified: bool,
}

/// Exhaustive search of `u₁ − v̌ − δ M₂` over a finite `(t, μ)` family
/// restricted to the moment ball `δ M₂ ≤ l₀/3 + e^T(‖u₁‖_∞ + ℓ₂)`. Ties
/// resolve to the lowest family index.
pub fn penalized_maximizer_search(search: &PenalizedSearch) -> Result<PenalizedGap> {
    if !(search.delta > 0.0) {
        return Err(Error::InvalidArgument("δ must be positive".into()));
    }
    let bound = penalization_bound(search.l0, search.horizon, search.u1_sup, search.ell2);
    let m2s: Vec<f64> = search
        .family
        .iter()
        .map(|(_, mu)| moment(mu, 2.0))
        .collect::<Result<Vec<f64>>>()?;
    let rejected: Vec<usize> = (0..m2s.len()).filter(|&i| search.delta * m2s[i] > bound).collect();
    let admitted: Vec<usize> = (0..m2s.len()).filter(|&i| search.delta * m2s[i] <= bound).collect();
    if admitted.is_empty() {
        return Err(Error::InvalidArgument("no family member inside the moment ball".into()));
    }
    let values: Vec<f64> = admitted
        .par_iter()
        .map(|&i| {
            let (t, mu) = &search.family[i];
            (search.u1)(*t, mu) - (search.v_check)(*t, mu) - search.delta * m2s[i]
        })
        .collect();
    let mut best = 0;
    for (j, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = j;
        }
    }
    let idx = admitted[best];
    let (t, mu) = &search.family[idx];
    Ok(PenalizedGap {
        delta: search.delta,
        bound,
        rejected,
        searched: admitted.len(),
        argmax: idx,
        t: *t,
        mu: mu.clone(),
        value: values[best],
        m2: m2s[idx],
        certified: search.delta * m2s[idx] <= bound,
    })
}

/// Time lattice × perturbed copies of a base atom cloud.
pub fn measure_catalog(
    times: &[f64],
    base: &DiscreteMeasure,
    variants: usize,
    scale: f64,
    seed: u64,
) -> Result<Vec<(f64, DiscreteMeasure)>> {
    let d = base.dim();
    let mut clouds = vec![base.clone()];
    for v in 1..variants {
        let mut rng = stream(seed, StreamRole::Sampler, 21, v as u64);
        let pts: Vec<f64> = base
            .points_flat()
            .iter()
            .map(|x| x + scale * rng.random_range(-1.0..=1.0))
            .collect();
        clouds.push(DiscreteMeasure::from_flat(d, pts, base.weights().to_vec())?);
    }
    let mut out = Vec::with_capacity(times.len() * clouds.len());
    for &t in times {
        for c in &clouds {
            out.push((t, c.clone()));
        }
    }
    Ok(out)
}

/// `k` equal-mass quantile atoms of the standard normal truncated to
/// `[-a, a]`, built from a trapezoid CDF on a fine grid.
pub fn truncated_normal_atoms(k: usize, a: f64) -> Result<DiscreteMeasure> {
    if k == 0 || !(a > 0.0) {
        return Err(Error::InvalidArgument("need k ≥ 1 atoms and a > 0".into()));
    }
    let cells = 1 << 16;
    let dx = 2.0 * a / cells as f64;
    let xs: Vec<f64> = (0..=cells).map(|i| -a + i as f64 * dx).collect();
    let mut cdf = vec![0.0; cells + 1];
    for i in 1..=cells {
        let f = |x: f64| (-0.5 * x * x).exp();
        cdf[i] = cdf[i - 1] + 0.5 * dx * (f(xs[i - 1]) + f(xs[i]));
    }
    let total = cdf[cells];
    let mut pts = Vec::with_capacity(k);
    let mut j = 0;
    for q in 0..k {
        let target = (q as f64 + 0.5) / k as f64 * total;
        while cdf[j + 1] < target {
            j += 1;
        }
        let frac = (target - cdf[j]) / (cdf[j + 1] - cdf[j]);
        pts.push(xs[j] + frac * dx);
    }
    DiscreteMeasure::uniform_flat(1, pts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub mean_w1: f64,
    pub std_error: f64,
    pub h_n: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateReport {
    pub trials: usize,
    pub rows: Vec<RateRow>,
    /// `max_n E W₁ / (h_n M_{q₀}^{1/q₀})`.
    pub fitted_constant: f64,
    /// `max ratio / min ratio`.
    pub band: f64,
    pub band_limit: f64,
    pub pass: bool,
}

/// Allowed spread of `E W₁ / h_n` across `n`.
pub const RATE_BAND: f64 = 2.0;

/// Monte Carlo `E W₁(μ, μ̂_n)` for one-dimensional `μ`, with `μ̂_n` the
/// empirical measure of `n` i.i.d. draws from `μ`.
pub fn fournier_guillin_probe(mu: &DiscreteMeasure, n_list: &[usize], trials: usize, seed: u64) -> Result<RateReport> {
    if mu.dim() != 1 {
        return Err(Error::InvalidArgument("the rate probe samples one-dimensional measures".into()));
    }
    if trials < 2 || n_list.is_empty() {
        return Err(Error::InvalidArgument("need ≥ 2 trials and a nonempty n list".into()));
    }
    let q = q0(1);
    let mq = moment(mu, q)?.powf(1.0 / q);
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let w: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|tr| -> Result<f64> {
                let mut rng = stream(seed, StreamRole::Sampler, n as u64, tr as u64);
                let pts: Vec<f64> = (0..n).map(|_| mu.sample(&mut rng)[0]).collect();
                let emp = DiscreteMeasure::uniform_flat(1, pts)?;
                wasserstein_1d(mu, &emp, 1.0)
            })
            .collect::<Result<Vec<f64>>>()?;
        let m = trials as f64;
        let mean = w.iter().sum::<f64>() / m;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
        let h = h_n(n, 1);
        rows.push(RateRow {
            n,
            mean_w1: mean,
            std_error: (var / m).sqrt(),
            h_n: h,
            ratio: mean / h,
        });
    }
    let hi = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let lo = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    let band = if hi == 0.0 { 1.0 } else { hi / lo };
    Ok(RateReport {
        trials,
        fitted_constant: if mq > 0.0 { hi / mq } else { 0.0 },
        band,
        band_limit: RATE_BAND,
        pass: band <= RATE_BAND,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{benchmark, control_grid, FnCoefficients, ProblemConstants};

    fn test_measure() -> DiscreteMeasure {
        DiscreteMeasure::new(1, &[vec![-0.7], vec![0.2], vec![1.1]], vec![0.3, 0.5, 0.2]).unwrap()
    }

    fn simple(c: FnCoefficients) -> ProblemSpec {
        ProblemSpec::new(
            "t",
            1,
            1.0,
            control_grid(1, -1.0, 1.0, 3),
            Arc::new(c),
            ProblemConstants { k: 1.0, rho: 0.0, beta: 1.0 },
        )
        .unwrap()
    }

    #[test]
    fn second_moment_identities_hold_exactly() {
        assert!(second_moment_identities(&test_measure()).pass);
        let mu2 = DiscreteMeasure::new(2, &[vec![0.3, -1.0], vec![2.0, 0.5]], vec![0.5, 0.5]).unwrap();
        assert!(second_moment_identities(&mu2).pass);
    }

    #[test]
    fn catalog_matches_finite_differences() {
        let mu2 = DiscreteMeasure::new(2, &[vec![0.3, -1.0], vec![1.2, 0.5], vec![-0.4, 0.1]], vec![0.2, 0.5, 0.3]).unwrap();
        for (d, mu) in [(1, test_measure()), (2, mu2)] {
            for u in CylindricalFunctional::catalog(d, 1.0) {
                let r = l_derivative_fd_check(&u, 0.3, &mu, 1e-4, L_DERIVATIVE_TOL).unwrap();
                assert!(r.pass, "{} d={d}: {r:?}", u.name);
            }
        }
    }

    #[test]
    fn squared_mean_derivatives() {
        let u = CylindricalFunctional::squared_mean(1);
        let mu = test_measure();
        let m = mu.mean()[0];
        assert_eq!(u.d_mu(0.0, &mu, &[5.0]), vec![2.0 * m]);
        assert_eq!(u.d2_mu(0.0, &mu, &[5.0], &[-1.0]), vec![2.0]);
        assert_eq!(u.dx_d_mu(0.0, &mu, &[5.0]), vec![0.0]);
    }

    #[test]
    fn residual_trivial_cases() {
        let zero = simple(FnCoefficients::new());
        let mu = test_measure();
        assert_eq!(hjb_residual(&zero, &CylindricalFunctional::constant(1, 0.0), 0.2, &mu).unwrap(), 0.0);
        let unit = simple(FnCoefficients::new().running_cost(|_, _, _, _| 1.0).drift(|_, x, _, a, o| o[0] = a[0] * x[0]));
        let r = hjb_residual(&unit, &CylindricalFunctional::time_to_go(1, 1.0), 0.2, &mu).unwrap();
        assert!(r.abs() < 1e-15, "{r}");
    }

    #[test]
    fn residual_permutation_and_weight_scaling() {
        let p = benchmark("mean-reverting-mf").unwrap();
        let u = CylindricalFunctional::mixed(1);
        let a = test_measure();
        let b = DiscreteMeasure::new(1, &[vec![1.1], vec![-0.7], vec![0.2]], vec![0.2, 0.3, 0.5]).unwrap();
        let ra = hjb_residual(&p, &u, 0.4, &a).unwrap();
        let rb = hjb_residual(&p, &u, 0.4, &b).unwrap();
        assert!((ra - rb).abs() < 1e-12);
        // Weights 3:5:2 rescaled before normalization give the same measure.
        let c = DiscreteMeasure::new(1, &[vec![-0.7], vec![0.2], vec![1.1]], vec![0.3 * 0.1 / 0.1, 0.5, 0.2]).unwrap();
        assert!((hjb_residual(&p, &u, 0.4, &c).unwrap() - ra).abs() < 1e-12);
    }

    #[test]
    fn residual_of_second_moment_under_common_noise() {
        // Pure common noise, f = 0: residual = ½ ∫ tr[σ⁰σ⁰ᵀ 2I] dμ = 1.
        let p = simple(FnCoefficients::new().sigma0(|_, _, o| o[0] = 1.0));
        let r = hjb_residual(&p, &CylindricalFunctional::second_moment(1), 0.0, &test_measure()).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        // Squared mean picks up the double integral: ½ · 2 = 1.
        let r = hjb_residual(&p, &CylindricalFunctional::squared_mean(1), 0.0, &test_measure()).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ito_pure_common_noise() {
        let p = simple(FnCoefficients::new().sigma0(|_, _, o| o[0] = 1.0));
        let mu = DiscreteMeasure::new(1, &[vec![-1.0], vec![1.0]], vec![0.5, 0.5]).unwrap();
        for u in [CylindricalFunctional::second_moment(1), CylindricalFunctional::squared_mean(1)] {
            let r = ito_generator_check(&p, &u, 0.0, &mu, 1, 0.01, 10_000, 1, 0.0, 4).unwrap();
            assert!((r.generator - 1.0).abs() < 1e-15);
            assert!(r.pass, "{r:?}");
        }
        let c = ito_generator_check(&p, &CylindricalFunctional::constant(1, 2.0), 0.0, &mu, 0, 0.01, 100, 1, 0.0, 4).unwrap();
        assert_eq!((c.quotient, c.generator), (0.0, 0.0));
    }

    #[test]
    fn ito_with_drift_and_idiosyncratic_noise() {
        let p = simple(
            FnCoefficients::new()
                .drift(|_, x, _, a, o| o[0] = a[0] - 0.5 * x[0])
                .sigma(|_, _, _, o| o[0] = 0.4)
                .sigma0(|_, x, o| o[0] = 0.3 + 0.1 * x[0].sin()),
        );
        let u = CylindricalFunctional::mixed(1);
        let r = ito_generator_check(&p, &u, 0.1, &test_measure(), 2, 0.005, 4000, 64, 0.05, 9).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn delta_recipe_takes_first_admissible() {
        assert_eq!(select_delta(1.0, 1.0, 0.5), Some(0.5));
        assert_eq!(select_delta(2.0, 0.5, 1.0), Some(1.0));
        assert_eq!(select_delta(0.1, 1.0, 1.0), None);
    }

    #[test]
    fn penalized_search_cases() {
        let base = DiscreteMeasure::new(1, &[vec![-0.5], vec![0.4], vec![1.0]], vec![0.3, 0.3, 0.4]).unwrap();
        let family = measure_catalog(&[0.0, 0.25, 0.5], &base, 8, 0.3, 1).unwrap();
        let v = |t: f64, mu: &DiscreteMeasure| (t + mu.mean()[0]).sin();
        let mut s = PenalizedSearch {
            delta: 0.25,
            l0: 0.1,
            horizon: 1.0,
            u1: &v,
            v_check: &v,
            u1_sup: 1.0,
            ell2: 2.0,
            family,
        };
        let m2: Vec<f64> = s.family.iter().map(|(_, m)| moment(m, 2.0).unwrap()).collect();
        let min = m2.iter().copied().fold(f64::INFINITY, f64::min);
        let r = penalized_maximizer_search(&s).unwrap();
        assert_eq!(r.value, -0.25 * min);
        assert!(r.certified);
        let shifted = |t: f64, mu: &DiscreteMeasure| v(t, mu) + 0.7;
        s.u1 = &shifted;
        let r2 = penalized_maximizer_search(&s).unwrap();
        assert_eq!(r2.argmax, r.argmax);
        assert!((r2.value - (0.7 - 0.25 * min)).abs() < 1e-12);
        // A member outside the ball is rejected.
        s.family.push((0.0, DiscreteMeasure::dirac(&[100.0])));
        let r3 = penalized_maximizer_search(&s).unwrap();
        assert_eq!(r3.rejected, vec![s.family.len() - 1]);
    }

    #[test]
    fn rate_probe_trivial_cases() {
        let dirac = DiscreteMeasure::dirac(&[0.0]);
        let r = fournier_guillin_probe(&dirac, &[1, 4], 20, 1).unwrap();
        assert!(r.rows.iter().all(|row| row.mean_w1 == 0.0));
        let two = DiscreteMeasure::new(1, &[vec![0.0], vec![1.0]], vec![0.5, 0.5]).unwrap();
        let r = fournier_guillin_probe(&two, &[1], 50, 1).unwrap();
        assert_eq!(r.rows[0].mean_w1, 0.5);
    }

    #[test]
    fn truncated_normal_quantiles() {
        let mu = truncated_normal_atoms(4096, 3.0).unwrap();
        assert!(mu.mean()[0].abs() < 1e-12);
        // Variance of N(0,1) truncated to [-3, 3]: 1 − 6φ(3)/(2Φ(3) − 1).
        let var = moment(&mu, 2.0).unwrap();
        let phi3 = (-4.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let expected = 1.0 - 6.0 * phi3 / 0.997_300_203_936_739_8;
        assert!((var - expected).abs() < 1e-4, "{var} {expected}");
    }
}
