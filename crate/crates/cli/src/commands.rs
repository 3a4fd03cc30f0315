use std::path::{Path, PathBuf};
use std::sync::Arc;

use mfc_approx::bellman::{gradient_bound_check, solve_bellman, GridSpec, Stepping, ValueGrid};
use mfc_approx::lift::{
    lift, lipschitz_probe, random_measure_pairs, run_ladder, ConvergenceReport, LiftEstimator,
};
use mfc_approx::mollify::{build_mollified, verify_mollifier_lemma, MollifierSpec, ParticleCoefficients, RawParticleCoefficients};
use mfc_approx::particle::{simulate_mean_field, ControlPolicy, MeanFieldConfig};
use mfc_approx::problem::{audit_assumption_a, audit_assumption_b, AssumptionReport, AuditConfig};
use mfc_approx::rng::{stream, StreamRole};
use mfc_approx::viscosity::{
    dpp_probe, fournier_guillin_probe, ito_generator_check, l_derivative_fd_check, second_moment_identities,
    truncated_normal_atoms, CylindricalFunctional, DppConfig, L_DERIVATIVE_TOL,
};
use mfc_approx::{DiscreteMeasure, ProblemSpec, Verdict, VERSION};
use rand::Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{ConfigError, ExperimentConfig};

pub const EXIT_PASS: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

const LIPSCHITZ_SLACK: f64 = 0.10;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: format!("config error: {e}"),
        }
    }
}

impl From<mfc_approx::Error> for CliError {
    fn from(e: mfc_approx::Error) -> Self {
        CliError {
            code: exit_code_for(&e),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: format!("output error: {e}"),
        }
    }
}

fn exit_code_for(e: &mfc_approx::Error) -> u8 {
    use mfc_approx::Error as E;
    match e {
        E::Cfl { .. } | E::NonFinite { .. } | E::QuadratureBudget(_) | E::OutsideGrid { .. } | E::Transport(_) => {
            EXIT_NUMERICAL
        }
        E::Ladder { source, .. } => exit_code_for(source),
        _ => EXIT_USAGE,
    }
}

type CmdResult = Result<bool, CliError>;

/// Writes outputs stamped with the config digest and library version.
pub struct Output {
    dir: PathBuf,
    digest: String,
    command: &'static str,
}

impl Output {
    pub fn new(dir: &Path, digest: String, command: &'static str) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            digest,
            command,
        })
    }

    fn stamp(&self) -> String {
        format!("# config_digest={}\n# version={}\n", self.digest, VERSION)
    }

    pub fn json<T: Serialize>(&self, name: &str, report: &T) -> Result<PathBuf, CliError> {
        let doc = json!({
            "command": self.command,
            "config_digest": self.digest,
            "version": VERSION,
            "report": report,
        });
        let path = self.dir.join(name);
        let text = serde_json::to_string_pretty(&doc).map_err(mfc_approx::Error::from)?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn text(&self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, self.stamp() + body)?;
        Ok(path)
    }

    fn grid(&self, name: &str, vg: &ValueGrid) -> Result<(), CliError> {
        let (header, csv) = vg.to_text()?;
        let mut header: serde_json::Value = serde_json::from_str(&header).map_err(mfc_approx::Error::from)?;
        header["config_digest"] = json!(self.digest);
        header["version"] = json!(VERSION);
        let text = serde_json::to_string_pretty(&header).map_err(mfc_approx::Error::from)?;
        std::fs::write(self.dir.join(format!("{name}.json")), text + "\n")?;
        self.text(&format!("{name}.csv"), &csv)?;
        Ok(())
    }
}

fn report_verdicts(out: &Output, name: &str, verdicts: &[Verdict]) -> CmdResult {
    for v in verdicts {
        println!("{}", v.summary());
    }
    let pass = verdicts.iter().all(|v| v.pass);
    out.json(name, &json!({ "pass": pass, "verdicts": verdicts }))?;
    Ok(pass)
}

fn coefficients(p: &ProblemSpec, n: usize, m: u32, quad_nodes: usize) -> Result<Box<dyn ParticleCoefficients>, CliError> {
    Ok(if m == 0 {
        Box::new(RawParticleCoefficients::new(p.clone(), n)?)
    } else {
        Box::new(build_mollified(p, n, MollifierSpec::new(m).with_nodes(quad_nodes))?)
    })
}

fn grid_spec(cfg: &ExperimentConfig, n: usize, eps: f64) -> GridSpec {
    let mut g = GridSpec::new(cfg.grid.radius, cfg.grid.nodes_for(n), eps);
    g.slices = cfg.grid.slices;
    if let Some(substeps) = cfg.grid.substeps {
        g.stepping = Stepping::Fixed { substeps };
    }
    g
}

fn audit_verdict(name: &str, inputs: &serde_json::Value, r: &AssumptionReport) -> Result<Verdict, CliError> {
    let worst = r.conditions.iter().map(|c| c.worst_ratio).fold(0.0, f64::max);
    Ok(Verdict::new(name, inputs, worst, 1.0 + r.tolerance, r.pass(), r)?)
}

pub fn cmd_check(cfg: &ExperimentConfig, seed: u64, out: &Output) -> CmdResult {
    let p = cfg.problem_spec()?;
    let c = &cfg.check;
    let audit = AuditConfig {
        n_samples: c.samples,
        seed,
        x_range: c.x_range,
        tolerance: 1e-6,
    };
    let inputs = json!({ "problem": cfg.problem, "seed": seed, "samples": c.samples, "x_range": c.x_range });
    let mut verdicts = Vec::new();
    if c.assumption_a {
        verdicts.push(audit_verdict("assumption_a", &inputs, &audit_assumption_a(&p, &audit))?);
    }
    if c.assumption_b {
        let r = audit_assumption_b(&p, c.fd_step, &audit)?;
        verdicts.push(audit_verdict("assumption_b", &inputs, &r)?);
    }
    if c.mollifier {
        for &n in &c.n_list {
            for &m in &c.m_list {
                let mc = build_mollified(&p, n, MollifierSpec::new(m).with_nodes(cfg.grid.mollifier_nodes))?;
                let r = verify_mollifier_lemma(&mc, &p, c.samples, seed)?;
                let worst = [&r.bound_f, &r.bound_g, &r.bound_b, &r.lipschitz]
                    .iter()
                    .map(|b| b.worst_ratio)
                    .fold(0.0, f64::max);
                let inputs = json!({ "problem": cfg.problem, "n": n, "m": m, "seed": seed, "samples": c.samples });
                verdicts.push(Verdict::new(&format!("mollifier n={n} m={m}"), &inputs, worst, 1.0, r.pass, &r)?);
            }
        }
    }
    report_verdicts(out, "check.json", &verdicts)
}

fn gnuplot_table(r: &ConvergenceReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_else(|| "NaN".into());
    let mut s = String::from("# parameter value std_error increment reference_gap envelope\n");
    for row in &r.rows {
        s.push_str(&format!(
            "{:?} {:?} {:?} {} {} {}\n",
            row.parameter,
            row.value,
            row.std_error,
            opt(row.increment),
            opt(row.reference_gap),
            opt(row.envelope)
        ));
    }
    s
}

pub fn cmd_ladder(cfg: &ExperimentConfig, seed: u64, out: &Output) -> CmdResult {
    let p = cfg.problem_spec()?;
    let mu = cfg.measure(p.dim())?;
    let reports = run_ladder(&p, &mu, &cfg.ladder_config(seed))?;
    for r in &reports {
        let axis = r.axis.name();
        out.text(&format!("ladder_{axis}.csv"), &r.to_csv())?;
        out.text(&format!("ladder_{axis}.dat"), &gnuplot_table(r))?;
        println!(
            "{} ladder axis={axis} rows={} fitted_constant={:.6e}{}",
            if r.pass { "PASS" } else { "FAIL" },
            r.rows.len(),
            r.fitted_constant,
            if r.note.is_empty() { String::new() } else { format!(" ({})", r.note) }
        );
    }
    let pass = reports.iter().all(|r| r.pass);
    out.json("ladder.json", &json!({ "pass": pass, "axes": reports }))?;
    Ok(pass)
}

fn dpp_verdicts(cfg: &ExperimentConfig, p: &ProblemSpec, seed: u64) -> Result<Vec<Verdict>, CliError> {
    let v = &cfg.verify;
    let mc = build_mollified(p, 1, MollifierSpec::new(v.m).with_nodes(cfg.grid.mollifier_nodes))?;
    let mut spec = grid_spec(cfg, 1, v.eps);
    let vg = solve_bellman(&mc, &spec)?;
    spec.nodes = spec.nodes.div_ceil(2);
    let coarse = solve_bellman(&mc, &spec)?;
    let mut policies: Vec<ControlPolicy> = (0..p.n_controls()).map(ControlPolicy::Constant).collect();
    policies.push(ControlPolicy::Feedback(Arc::new(vg.feedback_table(&mc)?)));
    let times = vg.times().to_vec();
    let last = times.len() - 1;
    let slice_dt = times[1] - times[0];
    let mut verdicts = Vec::new();
    for k in 0..v.dpp_points as u64 {
        let mut rng = stream(seed, StreamRole::Sampler, 1, k);
        let t_idx = rng.random_range(0..last);
        let s_idx = (t_idx + rng.random_range(1..=4usize)).min(last);
        let (t, s) = (times[t_idx], times[s_idx]);
        let pts: Vec<f64> = (0..3 * p.dim()).map(|_| rng.random_range(-1.5..=1.5)).collect();
        let mu = DiscreteMeasure::uniform_flat(p.dim(), pts)?;
        let diff = |time: f64| -> Result<f64, CliError> {
            Ok((lift(&vg, time, &mu, LiftEstimator::Exact)?.value - lift(&coarse, time, &mu, LiftEstimator::Exact)?.value)
                .abs())
        };
        let dcfg = DppConfig {
            n_common: v.dpp_common,
            n_copies: v.dpp_copies,
            n_steps: ((s - t) / (0.1 * slice_dt)).round().max(1.0) as usize,
            seed: seed.wrapping_add(k),
            grid_budget: diff(t)? + diff(s)?,
        };
        let r = dpp_probe(p, &vg, t, s, &mu, &policies, &dcfg)?;
        let worst = r.rows.iter().map(|row| row.gap / row.tolerance).fold(f64::INFINITY, f64::min);
        let inputs = json!({ "problem": cfg.problem, "t": t, "s": s, "mu": mu, "config": dcfg });
        verdicts.push(Verdict::new(&format!("dpp t={t:.3} s={s:.3}"), &inputs, -worst, 1.0, r.pass, &r)?);
    }
    Ok(verdicts)
}

fn lipschitz_verdicts(cfg: &ExperimentConfig, p: &ProblemSpec, seed: u64) -> Result<Vec<Verdict>, CliError> {
    let v = &cfg.verify;
    let grids: Vec<ValueGrid> = v
        .lipschitz_n
        .iter()
        .map(|&n| {
            let pc = coefficients(p, n, v.m, cfg.grid.mollifier_nodes)?;
            Ok(solve_bellman(pc.as_ref(), &grid_spec(cfg, n, v.eps))?)
        })
        .collect::<Result<_, CliError>>()?;
    let gr = gradient_bound_check(&grids.iter().collect::<Vec<_>>());
    let constant = gr.rows.iter().map(|r| r.2).fold(0.0, f64::max);
    let pairs = random_measure_pairs(p.dim(), v.lipschitz_pairs, 4, 2.0, seed)?;
    let mut verdicts = Vec::new();
    for vg in &grids {
        let r = lipschitz_probe(vg, 0.0, &pairs, constant, LIPSCHITZ_SLACK)?;
        let inputs = json!({ "problem": cfg.problem, "n": vg.n(), "pairs": v.lipschitz_pairs, "seed": seed });
        verdicts.push(Verdict::new(
            &format!("lipschitz n={}", vg.n()),
            &inputs,
            r.max_quotient,
            constant * (1.0 + LIPSCHITZ_SLACK),
            r.pass,
            &json!({ "probe": r, "gradient": gr }),
        )?);
    }
    Ok(verdicts)
}

pub fn cmd_verify(cfg: &ExperimentConfig, seed: u64, out: &Output) -> CmdResult {
    let p = cfg.problem_spec()?;
    let mu = cfg.measure(p.dim())?;
    let v = &cfg.verify;
    let mut verdicts = Vec::new();
    if v.identities {
        let r = second_moment_identities(&mu);
        verdicts.push(Verdict::new("m2_identities", &mu, r.failures.len() as f64, 0.0, r.pass, &r)?);
    }
    if v.derivatives {
        for u in CylindricalFunctional::catalog(p.dim(), p.horizon()) {
            let r = l_derivative_fd_check(&u, 0.0, &mu, v.fd_step, L_DERIVATIVE_TOL)?;
            let stat = r.first_order_error.max(r.second_order_error);
            let inputs = json!({ "functional": u.name, "mu": mu, "fd_step": v.fd_step });
            verdicts.push(Verdict::new(&format!("l_derivative {}", u.name), &inputs, stat, r.tolerance, r.pass, &r)?);
        }
    }
    if v.ito {
        let u = CylindricalFunctional::second_moment(p.dim());
        for &h in &v.ito_h {
            let r = ito_generator_check(&p, &u, 0.0, &mu, v.ito_action, h, v.ito_paths, v.ito_copies, v.ito_bias_per_h * h, seed)?;
            let inputs = json!({ "problem": cfg.problem, "mu": mu, "h": h, "paths": v.ito_paths, "seed": seed });
            verdicts.push(Verdict::new(
                &format!("ito h={h}"),
                &inputs,
                (r.quotient - r.generator).abs(),
                r.tolerance,
                r.pass,
                &r,
            )?);
        }
    }
    if v.dpp {
        verdicts.extend(dpp_verdicts(cfg, &p, seed)?);
    }
    if v.rate {
        let target = truncated_normal_atoms(4096, 3.0)?;
        let r = fournier_guillin_probe(&target, &v.rate_n, v.rate_trials, seed)?;
        let inputs = json!({ "n": v.rate_n, "trials": v.rate_trials, "seed": seed });
        verdicts.push(Verdict::new("empirical_rate", &inputs, r.band, r.band_limit, r.pass, &r)?);
    }
    if v.lipschitz {
        verdicts.extend(lipschitz_verdicts(cfg, &p, seed)?);
    }
    report_verdicts(out, "verify.json", &verdicts)
}

pub fn cmd_solve(cfg: &ExperimentConfig, out: &Output) -> CmdResult {
    let p = cfg.problem_spec()?;
    let s = &cfg.solve;
    let pc = coefficients(&p, s.n, s.m, cfg.grid.mollifier_nodes)?;
    let vg = solve_bellman(pc.as_ref(), &grid_spec(cfg, s.n, s.eps))?;
    out.grid("value_grid", &vg)?;
    let mu = cfg.measure(p.dim())?;
    let lifted = lift(&vg, s.t, &mu, LiftEstimator::Exact)?;
    let gradient_sup = vg.gradient_sup();
    println!(
        "solved {} n={} m={} eps={}: lifted value at t={} is {:.10}",
        cfg.problem, s.n, s.m, s.eps, s.t, lifted.value
    );
    out.json(
        "solve.json",
        &json!({
            "header": vg.header,
            "lifted": lifted,
            "gradient_sup": gradient_sup,
        }),
    )?;
    Ok(true)
}

#[derive(Serialize)]
struct SimulationSummary {
    policy: String,
    scenarios: usize,
    copies: usize,
    mean_reward: f64,
    std_error: f64,
    noise_check: mfc_approx::particle::NoiseCheck,
}

pub fn cmd_simulate(cfg: &ExperimentConfig, seed: u64, out: &Output) -> CmdResult {
    let p = cfg.problem_spec()?;
    let mu = cfg.measure(p.dim())?;
    let s = &cfg.simulate;
    if s.action >= p.n_controls() {
        return Err(ConfigError(format!("simulate.action: index {} out of range (< {})", s.action, p.n_controls())).into());
    }
    let mut mf = MeanFieldConfig::new(s.t0, s.n_copies, s.n_common, s.n_steps, seed);
    mf.eps = s.eps;
    let policy = ControlPolicy::Constant(s.action);
    let b = simulate_mean_field(&p, &mu, &policy, &mf)?;
    let mut csv = String::from("scenario,running_cost,terminal_cost,reward,terminal_mean,terminal_m2\n");
    let mut rewards = Vec::with_capacity(b.n_scenarios());
    for k in 0..b.n_scenarios() {
        let law = b.terminal_empirical(k);
        let mean = law.mean();
        let m2: f64 = law.iter().map(|(x, w)| w * x.iter().map(|c| c * c).sum::<f64>()).sum();
        let reward = b.running_cost[k] + b.terminal_cost[k];
        rewards.push(reward);
        csv.push_str(&format!(
            "{k},{:?},{:?},{reward:?},{:?},{m2:?}\n",
            b.running_cost[k], b.terminal_cost[k], mean[0]
        ));
    }
    out.text("simulate.csv", &csv)?;
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let summary = SimulationSummary {
        policy: policy.label(),
        scenarios: b.n_scenarios(),
        copies: b.n_particles(),
        mean_reward: mean,
        std_error: (var / n).sqrt(),
        noise_check: b.noise_check,
    };
    println!(
        "simulated {} under {}: mean reward {:.6} ± {:.6}",
        cfg.problem, summary.policy, summary.mean_reward, summary.std_error
    );
    out.json("simulate.json", &summary)?;
    Ok(true)
}
