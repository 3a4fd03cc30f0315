//! Experiment configuration. Every table rejects unknown keys so a misspelled
//! knob fails at load time.

use std::path::Path;

use mfc_approx::lift::{LadderConfig, LadderPoint, LiftEstimator, OracleConfig};
use mfc_approx::problem::{ProblemConstants, BENCHMARK_NAMES};
use mfc_approx::{benchmark, DiscreteMeasure, ProblemSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Registered benchmark name.
    pub problem: String,
    /// Root seed; `--seed` overrides it. There is no wall-clock default.
    pub seed: Option<u64>,
    pub horizon: Option<f64>,
    /// Replaces the benchmark's declared `(K, ρ, β)`.
    pub constants: Option<ConstantsOverride>,
    #[serde(default)]
    pub measure: MeasureConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub ladder: LadderSection,
    #[serde(default)]
    pub check: CheckSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub solve: SolveSection,
    #[serde(default)]
    pub simulate: SimulateSection,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsOverride {
    pub k: f64,
    pub rho: f64,
    pub beta: f64,
}

/// Initial law. Defaults to `½δ₋₁ + ½δ₁` along the first axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasureConfig {
    pub points: Vec<Vec<f64>>,
    /// Uniform when absent.
    pub weights: Option<Vec<f64>>,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            points: vec![vec![-1.0], vec![1.0]],
            weights: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub radius: f64,
    /// Nodes per axis indexed by `n − 1`; the last entry repeats.
    pub nodes: Vec<usize>,
    pub slices: usize,
    /// Gauss–Legendre nodes per axis of the mollifier quadrature.
    pub mollifier_nodes: usize,
    /// Fixed explicit substeps per slice; CFL-driven when absent.
    pub substeps: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            radius: 2.5,
            nodes: vec![321, 161, 61],
            slices: 20,
            mollifier_nodes: 7,
            substeps: None,
        }
    }
}

impl GridConfig {
    pub fn nodes_for(&self, n: usize) -> usize {
        self.nodes[(n.max(1) - 1).min(self.nodes.len() - 1)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderSection {
    pub t: f64,
    pub eps: f64,
    pub n: usize,
    pub m: u32,
    pub eps_list: Vec<f64>,
    pub n_list: Vec<usize>,
    pub m_list: Vec<u32>,
    pub estimator: EstimatorKind,
    pub draws: usize,
    /// Compare the n axis against the dense single-agent oracle.
    pub oracle: bool,
    pub oracle_nodes: usize,
}

impl Default for LadderSection {
    fn default() -> Self {
        Self {
            t: 0.0,
            eps: 0.1,
            n: 1,
            m: 32,
            eps_list: vec![0.4, 0.2, 0.1, 0.05],
            n_list: vec![],
            m_list: vec![],
            estimator: EstimatorKind::Exact,
            draws: 100_000,
            oracle: false,
            oracle_nodes: 641,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    pub assumption_a: bool,
    pub assumption_b: bool,
    pub mollifier: bool,
    pub samples: usize,
    pub x_range: f64,
    pub fd_step: f64,
    pub n_list: Vec<usize>,
    pub m_list: Vec<u32>,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            assumption_a: true,
            assumption_b: true,
            mollifier: true,
            samples: 1000,
            x_range: 10.0,
            fd_step: 1e-5,
            n_list: vec![1, 2],
            m_list: vec![8, 32],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub identities: bool,
    pub derivatives: bool,
    pub fd_step: f64,
    pub ito: bool,
    pub ito_h: Vec<f64>,
    pub ito_paths: usize,
    pub ito_copies: usize,
    pub ito_action: usize,
    /// Allowed Euler bias per unit `h`.
    pub ito_bias_per_h: f64,
    pub dpp: bool,
    pub dpp_points: usize,
    pub dpp_common: usize,
    pub dpp_copies: usize,
    pub eps: f64,
    pub m: u32,
    pub rate: bool,
    pub rate_trials: usize,
    pub rate_n: Vec<usize>,
    pub lipschitz: bool,
    pub lipschitz_n: Vec<usize>,
    pub lipschitz_pairs: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            identities: true,
            derivatives: true,
            fd_step: 1e-4,
            ito: true,
            ito_h: vec![0.02, 0.01],
            ito_paths: 10_000,
            ito_copies: 16,
            ito_action: 0,
            ito_bias_per_h: 1.0,
            dpp: true,
            dpp_points: 5,
            dpp_common: 200,
            dpp_copies: 48,
            eps: 0.1,
            m: 64,
            rate: true,
            rate_trials: 200,
            rate_n: vec![4, 16, 64, 256],
            lipschitz: true,
            lipschitz_n: vec![1, 2],
            lipschitz_pairs: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveSection {
    pub n: usize,
    /// Mollifier resolution; 0 solves with the raw coefficients.
    pub m: u32,
    pub eps: f64,
    pub t: f64,
}

impl Default for SolveSection {
    fn default() -> Self {
        Self {
            n: 1,
            m: 32,
            eps: 0.1,
            t: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    /// Index into the control set of a constant policy.
    pub action: usize,
    pub t0: f64,
    pub eps: f64,
    pub n_copies: usize,
    pub n_common: usize,
    pub n_steps: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            action: 0,
            t0: 0.0,
            eps: 0.0,
            n_copies: 64,
            n_common: 200,
            n_steps: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        if !BENCHMARK_NAMES.contains(&cfg.problem.as_str()) {
            return Err(ConfigError(format!(
                "problem: unknown benchmark `{}` (known: {})",
                cfg.problem,
                BENCHMARK_NAMES.join(", ")
            )));
        }
        if cfg.grid.nodes.is_empty() {
            return Err(ConfigError("grid.nodes: at least one entry required".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.seed
            .ok_or_else(|| ConfigError("seed: required (set it in the config or pass --seed)".into()))
    }

    /// SHA-256 of the canonical JSON of the resolved config.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// The benchmark with any horizon and constant overrides applied; a
    /// violated invariant is reported by name.
    pub fn problem_spec(&self) -> Result<ProblemSpec, ConfigError> {
        let named = |e: mfc_approx::Error| ConfigError(format!("problem `{}`: {e}", self.problem));
        let mut p = benchmark(&self.problem).map_err(named)?;
        if let Some(h) = self.horizon {
            p = p.with_horizon(h).map_err(named)?;
        }
        if let Some(c) = self.constants {
            p = p
                .with_constants(ProblemConstants {
                    k: c.k,
                    rho: c.rho,
                    beta: c.beta,
                })
                .map_err(named)?;
        }
        Ok(p)
    }

    pub fn measure(&self, dim: usize) -> Result<DiscreteMeasure, ConfigError> {
        let m = &self.measure;
        let weights = match &m.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / m.points.len() as f64; m.points.len()],
        };
        let points: Vec<Vec<f64>> = m
            .points
            .iter()
            .map(|x| {
                let mut y = x.clone();
                y.resize(dim.max(x.len()), 0.0);
                y
            })
            .collect();
        DiscreteMeasure::new(dim, &points, weights).map_err(|e| ConfigError(format!("measure: {e}")))
    }

    pub fn ladder_config(&self, seed: u64) -> LadderConfig {
        let l = &self.ladder;
        let estimator = match l.estimator {
            EstimatorKind::Exact => LiftEstimator::Exact,
            EstimatorKind::Auto => LiftEstimator::Auto { draws: l.draws, seed },
            EstimatorKind::MonteCarlo => LiftEstimator::MonteCarlo { draws: l.draws, seed },
        };
        LadderConfig {
            t: l.t,
            base: LadderPoint {
                eps: l.eps,
                n: l.n,
                m: l.m,
            },
            eps_list: l.eps_list.clone(),
            n_list: l.n_list.clone(),
            m_list: l.m_list.clone(),
            radius: self.grid.radius,
            nodes: self.grid.nodes.clone(),
            slices: self.grid.slices,
            mollifier_nodes: self.grid.mollifier_nodes,
            estimator,
            oracle: l.oracle.then(|| OracleConfig {
                radius: self.grid.radius,
                nodes: l.oracle_nodes,
                slices: self.grid.slices,
                probe_seed: seed,
            }),
        }
    }
}
