//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Tolerances are pinned below.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mfc_approx::bellman::{gradient_bound_check, solve_bellman, GridSpec, ValueGrid};
use mfc_approx::lift::{
    lift, lipschitz_probe, oracle_value_decoupled, random_measure_pairs, run_ladder, LadderConfig, LadderPoint,
    LiftEstimator, OracleConfig, EPS_RATIO_BAND,
};
use mfc_approx::measure::{moment, wasserstein_1d, wasserstein_lp};
use mfc_approx::mollify::{build_mollified, verify_mollifier_lemma, MollifierSpec};
use mfc_approx::particle::ControlPolicy;
use mfc_approx::problem::{control_grid, FnCoefficients, ProblemConstants, BENCHMARK_NAMES};
use mfc_approx::rng::{stream, StreamRole};
use mfc_approx::viscosity::{
    dpp_probe, fournier_guillin_probe, ito_generator_check, l_derivative_fd_check, measure_catalog,
    penalized_maximizer_search, second_moment_identities, select_delta, truncated_normal_atoms,
    CylindricalFunctional, DppConfig, PenalizedSearch,
};
use mfc_approx::{benchmark, DiscreteMeasure, ProblemSpec};
use rand::Rng;

const OT_TOL: f64 = 1e-9;
const SANITY_TOL: f64 = 1e-3;
const ORACLE_TOL: f64 = 5e-2;
const GRADIENT_SPREAD: f64 = 0.25;
const LIPSCHITZ_SLACK: f64 = 0.10;
const L_DERIVATIVE_REL: f64 = 1e-6;
const FD_STEP: f64 = 1e-4;
const ITO_SE: f64 = 3.0;
const RATE_BAND: f64 = 2.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn two_point() -> DiscreteMeasure {
    DiscreteMeasure::new(1, &[vec![-1.0], vec![1.0]], vec![0.5, 0.5]).unwrap()
}

fn random_measure(rng: &mut impl Rng, atoms: usize, half_width: f64) -> DiscreteMeasure {
    let pts: Vec<f64> = (0..atoms).map(|_| rng.random_range(-half_width..=half_width)).collect();
    let w: Vec<f64> = (0..atoms).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    DiscreteMeasure::from_flat(1, pts, w.into_iter().map(|x| x / s).collect()).unwrap()
}

fn c1_transport() -> Outcome {
    let mut worst_agree: f64 = 0.0;
    let mut worst_axiom: f64 = 0.0;
    for k in 0..100u64 {
        let mut rng = stream(1, StreamRole::Sampler, 0, k);
        let a = random_measure(&mut rng, 10, 3.0);
        let b = random_measure(&mut rng, 10, 3.0);
        let c = random_measure(&mut rng, 10, 3.0);
        for q in [1.0, 2.0] {
            let exact = wasserstein_1d(&a, &b, q).unwrap();
            let lp = wasserstein_lp(&a, &b, q).unwrap();
            worst_agree = worst_agree.max((exact - lp).abs());
            let ba = wasserstein_1d(&b, &a, q).unwrap();
            let aa = wasserstein_1d(&a, &a, q).unwrap();
            let bc = wasserstein_1d(&b, &c, q).unwrap();
            let ac = wasserstein_1d(&a, &c, q).unwrap();
            worst_axiom = worst_axiom
                .max((exact - ba).abs())
                .max(aa.abs())
                .max((ac - exact - bc).max(0.0))
                .max((-exact).max(0.0));
        }
    }
    outcome(
        worst_agree <= OT_TOL && worst_axiom <= OT_TOL,
        format!("max |1d − lp| = {worst_agree:.2e}, max axiom defect = {worst_axiom:.2e} (tol {OT_TOL:e})"),
    )
}

fn c2_mollifier() -> Outcome {
    let mut failures = Vec::new();
    let mut runs = 0;
    for name in BENCHMARK_NAMES {
        let p = benchmark(name).unwrap();
        for n in [1, 2] {
            for m in [8, 32] {
                let mc = build_mollified(&p, n, MollifierSpec::new(m)).unwrap();
                let r = verify_mollifier_lemma(&mc, &p, 1000, 7).unwrap();
                runs += 1;
                let bounds = r.bound_f.violations + r.bound_g.violations + r.bound_b.violations;
                if bounds + r.lipschitz.violations + r.pointwise_gap_violations > 0 || !r.gap_sup_decreasing {
                    failures.push(format!(
                        "{name} n={n} m={m}: bounds {bounds}, lipschitz {}, gap {}",
                        r.lipschitz.violations, r.pointwise_gap_violations
                    ));
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{runs} runs × 1000 samples, zero violations, gap strictly decreasing 8 → 64")
        } else {
            failures.join("; ")
        },
    )
}

fn c3_bellman_sanity() -> Outcome {
    let p = ProblemSpec::new(
        "unit-running-cost",
        1,
        1.0,
        control_grid(1, -1.0, 1.0, 5),
        Arc::new(
            FnCoefficients::new()
                .running_cost(|_, _, _, _| 1.0)
                .drift(|_, x, _, a, o| o[0] = 0.5 * a[0] * x[0].cos())
                .sigma(|_, _, _, o| o[0] = 0.3)
                .time_homogeneous(true),
        ),
        ProblemConstants { k: 1.0, rho: 0.0, beta: 1.0 },
    )
    .unwrap();
    let mc = build_mollified(&p, 1, MollifierSpec::new(8)).unwrap();
    let vg = solve_bellman(&mc, &GridSpec::new(2.0, 101, 0.1)).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in vg.times().iter().enumerate() {
        for v in vg.slice(k) {
            worst = worst.max((v - (1.0 - t)).abs());
        }
    }
    let mf = benchmark("mean-reverting-mf").unwrap();
    let mc2 = build_mollified(&mf, 2, MollifierSpec::new(16)).unwrap();
    let vg2 = solve_bellman(&mc2, &GridSpec::new(2.5, 41, 0.1)).unwrap();
    let last = vg2.times().len() - 1;
    let terminal_exact = (0..vg2.nodes_per_slice()).all(|node| vg2.slice(last)[node] == mc2.terminal_value(&vg2.node_point(node)));
    let dec = vg2.decomposition_check(&mc2, 100, 3).unwrap();
    outcome(
        worst <= SANITY_TOL && terminal_exact && dec.mismatches == 0,
        format!(
            "max |v̄ − (T − t)| = {worst:.2e}, terminal exact = {terminal_exact}, decomposition mismatches {}/100",
            dec.mismatches
        ),
    )
}

fn c4_oracle() -> Outcome {
    let p = benchmark("decoupled-bounded").unwrap();
    let mu = two_point();
    let oracle = oracle_value_decoupled(&p, 0.0, &mu, &OracleConfig::default()).unwrap();
    let mc = build_mollified(&p, 2, MollifierSpec::new(32)).unwrap();
    let vg = solve_bellman(&mc, &GridSpec::new(2.5, 321, 0.05)).unwrap();
    let v = lift(&vg, 0.0, &mu, LiftEstimator::Exact).unwrap().value;
    let gap = (v - oracle.value).abs();
    outcome(
        gap <= ORACLE_TOL,
        format!(
            "v(ε=0.05,n=2,m=32) = {v:.6}, oracle = {:.10} (Richardson of {}/{} nodes), gap {gap:.3e} (tol {ORACLE_TOL:e})",
            oracle.value, oracle.coarse_nodes, oracle.fine_nodes
        ),
    )
}

fn c5_eps_linearity() -> Outcome {
    let p = benchmark("decoupled-bounded").unwrap();
    let cfg = LadderConfig {
        t: 0.0,
        base: LadderPoint { eps: 0.1, n: 1, m: 64 },
        eps_list: vec![0.4, 0.2, 0.1, 0.05],
        n_list: vec![],
        m_list: vec![],
        radius: 2.5,
        nodes: vec![641],
        slices: 20,
        mollifier_nodes: 7,
        estimator: LiftEstimator::Exact,
        oracle: None,
    };
    let reports = run_ladder(&p, &two_point(), &cfg).unwrap();
    let r = &reports[0];
    let incs: Vec<String> = r.rows.iter().filter_map(|row| row.increment).map(|d| format!("{d:.4e}")).collect();
    let ratios: Vec<String> = r.ratios.iter().map(|x| format!("{x:.3}")).collect();
    outcome(
        r.pass,
        format!(
            "gaps [{}], ratios [{}] (band [{}, {}])",
            incs.join(", "),
            ratios.join(", "),
            EPS_RATIO_BAND.0,
            EPS_RATIO_BAND.1
        ),
    )
}

struct GradientRun {
    grids: Vec<ValueGrid>,
    constant: f64,
}

fn gradient_grids(name: &str) -> GradientRun {
    let p = benchmark(name).unwrap();
    let grids: Vec<ValueGrid> = [(1usize, 321usize), (2, 161), (3, 61)]
        .iter()
        .map(|&(n, nodes)| {
            let mc = build_mollified(&p, n, MollifierSpec::new(32)).unwrap();
            solve_bellman(&mc, &GridSpec::new(2.5, nodes, 0.1)).unwrap()
        })
        .collect();
    let r = gradient_bound_check(&grids.iter().collect::<Vec<_>>());
    let constant = r.rows.iter().map(|row| row.2).fold(0.0, f64::max);
    GradientRun { grids, constant }
}

fn c6_gradient(runs: &[(&str, &GradientRun)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, run) in runs {
        let r = gradient_bound_check(&run.grids.iter().collect::<Vec<_>>());
        pass &= r.spread <= GRADIENT_SPREAD;
        let scaled: Vec<String> = r.rows.iter().map(|row| format!("n={}: {:.4}", row.0, row.2)).collect();
        parts.push(format!("{name} [{}] spread {:.3}", scaled.join(", "), r.spread));
    }
    outcome(pass, format!("n·sup|∇v̄|: {} (tol {GRADIENT_SPREAD})", parts.join("; ")))
}

fn c7_lipschitz(run: &GradientRun) -> Outcome {
    let pairs = random_measure_pairs(1, 50, 4, 2.0, 17).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for vg in &run.grids {
        let probe = lipschitz_probe(vg, 0.0, &pairs, run.constant, LIPSCHITZ_SLACK).unwrap();
        pass &= probe.pass;
        parts.push(format!("n={}: {:.4}", vg.n(), probe.max_quotient));
    }
    outcome(
        pass,
        format!(
            "max quotient {} vs C₄ = {:.4} × {:.2} over 50 pairs",
            parts.join(", "),
            run.constant,
            1.0 + LIPSCHITZ_SLACK
        ),
    )
}

fn c8_l_derivatives() -> Outcome {
    let mu1 = DiscreteMeasure::new(1, &[vec![-0.7], vec![0.2], vec![1.1]], vec![0.3, 0.5, 0.2]).unwrap();
    let mu2 = DiscreteMeasure::new(2, &[vec![0.3, -1.0], vec![1.2, 0.5], vec![-0.4, 0.1]], vec![0.2, 0.5, 0.3]).unwrap();
    let identities = second_moment_identities(&mu1).pass && second_moment_identities(&mu2).pass;
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for (d, mu) in [(1, &mu1), (2, &mu2)] {
        for u in CylindricalFunctional::catalog(d, 1.0) {
            let r = l_derivative_fd_check(&u, 0.3, mu, FD_STEP, L_DERIVATIVE_REL).unwrap();
            worst = worst.max(r.first_order_error).max(r.second_order_error);
            if !r.pass {
                failed.push(format!("{} (d={d})", u.name));
            }
        }
    }
    outcome(
        identities && failed.is_empty(),
        format!(
            "M₂ identities exact = {identities}; catalog worst relative error {worst:.2e} (tol {L_DERIVATIVE_REL:e}){}",
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(", ")) }
        ),
    )
}

fn c9_ito() -> Outcome {
    let p = ProblemSpec::new(
        "pure-common-noise",
        1,
        1.0,
        control_grid(1, -1.0, 1.0, 3),
        Arc::new(FnCoefficients::new().sigma0(|_, _, o| o[0] = 1.0).time_homogeneous(true)),
        ProblemConstants { k: 1.0, rho: 0.0, beta: 1.0 },
    )
    .unwrap();
    let u = CylindricalFunctional::second_moment(1);
    let r = ito_generator_check(&p, &u, 0.0, &two_point(), 1, 0.01, 10_000, 1, 0.0, 11).unwrap();
    let z = (r.quotient - 1.0).abs() / r.std_error;
    outcome(
        (r.generator - 1.0).abs() < 1e-15 && z <= ITO_SE,
        format!(
            "quotient {:.4} ± {:.4}, generator {}, |quotient − 1| = {z:.2} se (tol {ITO_SE})",
            r.quotient, r.std_error, r.generator
        ),
    )
}

fn c10_dpp() -> Outcome {
    let p = benchmark("decoupled-bounded").unwrap();
    let mc = build_mollified(&p, 1, MollifierSpec::new(64)).unwrap();
    let mut grid = GridSpec::new(2.5, 321, 0.1);
    let vg = solve_bellman(&mc, &grid).unwrap();
    grid.nodes = 161;
    let coarse = solve_bellman(&mc, &grid).unwrap();
    let mut policies: Vec<ControlPolicy> = (0..p.n_controls()).map(ControlPolicy::Constant).collect();
    policies.push(ControlPolicy::Feedback(Arc::new(vg.feedback_table(&mc).unwrap())));
    let dt_slice = vg.times()[1];
    let mut pass = true;
    let mut parts = Vec::new();
    for k in 0..5u64 {
        let mut rng = stream(23, StreamRole::Sampler, 1, k);
        let t_idx = rng.random_range(0..16usize);
        let s_idx = (t_idx + rng.random_range(1..=4usize)).min(vg.times().len() - 1);
        let (t, s) = (vg.times()[t_idx], vg.times()[s_idx]);
        let pts: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..=1.5)).collect();
        let mu = DiscreteMeasure::uniform_flat(1, pts).unwrap();
        let diff = |time: f64| {
            (lift(&vg, time, &mu, LiftEstimator::Exact).unwrap().value
                - lift(&coarse, time, &mu, LiftEstimator::Exact).unwrap().value)
                .abs()
        };
        let cfg = DppConfig {
            n_common: 200,
            n_copies: 48,
            n_steps: ((s - t) / (0.1 * dt_slice)).round() as usize,
            seed: 5 + k,
            grid_budget: diff(t) + diff(s),
        };
        let r = dpp_probe(&p, &vg, t, s, &mu, &policies, &cfg).unwrap();
        pass &= r.pass;
        let worst = r
            .rows
            .iter()
            .map(|row| row.gap / row.tolerance)
            .fold(f64::INFINITY, f64::min);
        parts.push(format!("(t={t:.2}, s={s:.2}) best {} gap {:.2e}, min gap/tol {worst:.2}", r.best_policy, r.best_gap));
    }
    outcome(pass, parts.join("; "))
}

fn c11_rate() -> Outcome {
    let mu = truncated_normal_atoms(4096, 3.0).unwrap();
    let r = fournier_guillin_probe(&mu, &[4, 16, 64, 256], 200, 31).unwrap();
    let ratios: Vec<String> = r.rows.iter().map(|row| format!("n={}: {:.3}", row.n, row.ratio)).collect();
    outcome(
        r.band <= RATE_BAND,
        format!("E W₁ / h_n [{}], band {:.3} (limit {RATE_BAND})", ratios.join(", "), r.band),
    )
}

fn c12_penalized() -> Outcome {
    let p = benchmark("decoupled-bounded").unwrap();
    let mc = build_mollified(&p, 1, MollifierSpec::new(32)).unwrap();
    let vg = solve_bellman(&mc, &GridSpec::new(2.5, 161, 0.1)).unwrap();
    let base = DiscreteMeasure::new(1, &[vec![-0.8], vec![0.1], vec![0.9]], vec![0.3, 0.3, 0.4]).unwrap();
    let family = measure_catalog(&[0.0, 0.25, 0.5, 0.75], &base, 20, 0.3, 41).unwrap();
    let planted = 2 * 20 + 13;
    let (t_star, mu_star) = family[planted].clone();
    let height = 0.5;
    let v_check = |t: f64, mu: &DiscreteMeasure| lift(&vg, t, mu, LiftEstimator::Exact).unwrap().value;
    let u1 = |t: f64, mu: &DiscreteMeasure| {
        let w = wasserstein_1d(mu, &mu_star, 1.0).unwrap();
        v_check(t, mu) + height * (-((t - t_star).powi(2) + w * w) / 0.0025).exp()
    };
    let ell2 = p.value_bound();
    let l0 = height;
    let m2_star = moment(&mu_star, 2.0).unwrap();
    let Some(delta) = select_delta(height, m2_star, l0) else {
        return outcome(false, "no admissible δ".into());
    };
    let search = PenalizedSearch {
        delta,
        l0,
        horizon: p.horizon(),
        u1: &u1,
        v_check: &v_check,
        u1_sup: ell2 + height,
        ell2,
        family,
    };
    let r = penalized_maximizer_search(&search).unwrap();
    outcome(
        r.argmax == planted && r.certified,
        format!(
            "argmax {} (planted {planted}), δ = {delta}, δM₂ = {:.4} ≤ bound {:.4}: {}",
            r.argmax,
            delta * r.m2,
            r.bound,
            r.certified
        ),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |id: usize, title: &str, limit: Duration, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let elapsed = start.elapsed();
        let in_time = elapsed <= limit;
        let pass = o.pass && in_time;
        if !pass {
            failures += 1;
        }
        println!(
            "[{}] criterion {id:>2} {title}: {} ({:.1}s, limit {}s{})",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", over time" }
        );
    };
    report(1, "transport", Duration::from_secs(10), &mut c1_transport);
    report(2, "mollifier bounds", Duration::from_secs(120), &mut c2_mollifier);
    report(3, "Bellman sanity", Duration::from_secs(60), &mut c3_bellman_sanity);
    report(4, "oracle agreement", Duration::from_secs(300), &mut c4_oracle);
    report(5, "ε-linearity", Duration::from_secs(600), &mut c5_eps_linearity);
    // Criteria 6 and 7 share the gradient grids; their solve time counts
    // towards criterion 6.
    let start = Instant::now();
    let decoupled = gradient_grids("decoupled-bounded");
    let coupled = gradient_grids("mean-reverting-mf");
    let grids_time = start.elapsed();
    report(6, "gradient scaling", Duration::from_secs(600).saturating_sub(grids_time), &mut || {
        c6_gradient(&[("decoupled-bounded", &decoupled), ("mean-reverting-mf", &coupled)])
    });
    report(7, "W₁-Lipschitz lift", Duration::from_secs(120), &mut || c7_lipschitz(&decoupled));
    report(8, "L-derivatives", Duration::from_secs(10), &mut c8_l_derivatives);
    report(9, "Itô generator", Duration::from_secs(60), &mut c9_ito);
    report(10, "DPP one-sided", Duration::from_secs(300), &mut c10_dpp);
    report(11, "empirical rate", Duration::from_secs(120), &mut c11_rate);
    report(12, "penalized maximizer", Duration::from_secs(30), &mut c12_penalized);
    if failures == 0 {
        println!("acceptance: all 12 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria fail");
        ExitCode::FAILURE
    }
}
