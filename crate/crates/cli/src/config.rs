//! Run configuration file.

use std::path::{Path, PathBuf};

use mfjump::control::MinimizerSettings;
use mfjump::exec::Exec;
use mfjump::measure::EmpiricalMeasure;
use mfjump::model::ModelDescriptor;
use mfjump::regression::RegressionConfig;
use mfjump::solver::SolveConfig;
use mfjump::value::HjbConfig;
use mfjump::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianInit {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub particles: usize,
    /// Sampling seed; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmpiricalInit {
    /// CSV with a header line; relative paths resolve against the config file.
    pub file: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialMeasure {
    Gaussian(GaussianInit),
    Empirical(EmpiricalInit),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub t0: f64,
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { t0: 0.0, horizon: 1.0, steps: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub damping: f64,
    pub anderson_depth: usize,
    pub tol_control: f64,
    pub max_picard: usize,
    pub regression: RegressionConfig,
    pub minimizer: MinimizerSettings,
    pub allow_insufficient: bool,
    pub optimality_threshold: f64,
    pub exec: Exec,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let d = SolveConfig::default();
        SolverSettings {
            damping: d.damping,
            anderson_depth: d.anderson_depth,
            tol_control: d.tol_control,
            max_picard: d.max_picard,
            regression: d.regression,
            minimizer: d.minimizer,
            allow_insufficient: d.allow_insufficient,
            optimality_threshold: d.optimality_threshold,
            exec: d.exec,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySettings {
    pub probes: usize,
    /// Finite-difference step.
    pub h: f64,
    /// Relative tolerance of the derivative check.
    pub tol: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings { probes: 20, h: 1e-5, tol: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifySettings {
    /// Constant shifts `delta` of the computed control; a single entry is broadcast
    /// over the control dimension.
    pub shifts: Vec<Vec<f64>>,
    /// Number of random smooth shift fields.
    pub random_fields: usize,
    pub amplitude: f64,
}

impl Default for CertifySettings {
    fn default() -> Self {
        CertifySettings { shifts: vec![vec![0.1], vec![0.2], vec![0.5]], random_fields: 2, amplitude: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: mfjump::model::ModelDescriptor,
    pub initial: InitialMeasure,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub verify: VerifySettings,
    #[serde(default)]
    pub certify: CertifySettings,
    #[serde(default)]
    pub hjb: HjbConfig,
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { path, message } if !path.starts_with(prefix) => {
            Error::config(format!("{prefix}{path}"), message)
        }
        other => other,
    }
}

impl RunConfig {
    /// Parses JSON, reporting the schema path of the first offending key.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let InitialMeasure::Empirical(emp) = &mut cfg.initial {
            if emp.file.is_relative() {
                if let Some(dir) = path.parent() {
                    emp.file = dir.join(&emp.file);
                }
            }
        }
        Ok(cfg)
    }

    pub fn solve_config(&self) -> Result<SolveConfig> {
        let s = &self.solver;
        let cfg = SolveConfig {
            t0: self.grid.t0,
            horizon: self.grid.horizon,
            steps: self.grid.steps,
            damping: s.damping,
            anderson_depth: s.anderson_depth,
            tol_control: s.tol_control,
            max_picard: s.max_picard,
            seed: self.seed,
            regression: s.regression,
            minimizer: s.minimizer,
            allow_insufficient: s.allow_insufficient,
            optimality_threshold: s.optimality_threshold,
            exec: s.exec,
        };
        if let Err(e) = mfjump::grid::TimeGrid::new(cfg.t0, cfg.horizon, cfg.steps) {
            return Err(Error::config("grid", e.to_string()));
        }
        cfg.validate().map_err(|e| prefixed("solver.", e))?;
        Ok(cfg)
    }

    pub fn initial_measure(&self) -> Result<EmpiricalMeasure> {
        let mu = match &self.initial {
            InitialMeasure::Gaussian(g) => {
                if g.particles == 0 {
                    return Err(Error::config("initial.gaussian.particles", "must be positive"));
                }
                if g.mean.len() != self.model.n {
                    return Err(Error::config("initial.gaussian.mean", format!("expected {} entries", self.model.n)));
                }
                if g.std.len() != g.mean.len() {
                    return Err(Error::config("initial.gaussian.std", "must match the length of mean"));
                }
                if let Some(i) = g.std.iter().position(|s| !(*s >= 0.0 && s.is_finite())) {
                    return Err(Error::config(format!("initial.gaussian.std[{i}]"), "must be finite and non-negative"));
                }
                EmpiricalMeasure::sample_gaussian(g.particles, &g.mean, &g.std, g.seed.unwrap_or(self.seed))
                    .map_err(|e| Error::config("initial.gaussian", e.to_string()))?
            }
            InitialMeasure::Empirical(emp) => mfjump::io::read_measure_csv(&emp.file)
                .map_err(|e| Error::config("initial.empirical.file", e.to_string()))?,
        };
        if mu.dim() != self.model.n {
            return Err(Error::config("initial", format!("points have dimension {}, the model {}", mu.dim(), self.model.n)));
        }
        Ok(mu)
    }

    pub fn validate_sections(&self) -> Result<()> {
        let v = &self.verify;
        if v.probes == 0 {
            return Err(Error::config("verify.probes", "must be positive"));
        }
        if !(v.h > 0.0) {
            return Err(Error::config("verify.h", "must be positive"));
        }
        if !(v.tol > 0.0) {
            return Err(Error::config("verify.tol", "must be positive"));
        }
        let c = &self.certify;
        for (i, s) in c.shifts.iter().enumerate() {
            if s.is_empty() || s.iter().any(|x| !x.is_finite()) {
                return Err(Error::config(format!("certify.shifts[{i}]"), "must be a non-empty finite vector"));
            }
        }
        if !(c.amplitude.is_finite() && c.amplitude >= 0.0) {
            return Err(Error::config("certify.amplitude", "must be finite and non-negative"));
        }
        let h = &self.hjb;
        if h.probes == 0 {
            return Err(Error::config("hjb.probes", "must be positive"));
        }
        if h.value.quadrature_nodes == 0 {
            return Err(Error::config("hjb.value.quadrature_nodes", "must be positive"));
        }
        Ok(())
    }
}

/// Fully validated inputs of one run.
pub struct Prepared {
    pub problem: mfjump::model::ProblemData,
    pub mu: EmpiricalMeasure,
    pub solve: SolveConfig,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let problem = ModelDescriptor::build(&cfg.model)?;
    let solve = cfg.solve_config()?;
    let mu = cfg.initial_measure()?;
    cfg.validate_sections()?;
    Ok(Prepared { problem, mu, solve })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> serde_json::Value {
        let model = ModelDescriptor::from_lq(&mfjump::lqoracle::LqSpec::fixture_with_jump());
        serde_json::json!({
            "model": model,
            "initial": {"gaussian": {"mean": [0.5], "std": [0.4], "particles": 100}},
            "grid": {"steps": 10},
            "seed": 3
        })
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::parse(&fixture().to_string()).unwrap();
        let back = RunConfig::parse(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, back);
        let p = prepare(&cfg).unwrap();
        assert_eq!((p.mu.len(), p.solve.steps, p.solve.seed), (100, 10, 3));
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let mut v = fixture();
        v["solver"] = serde_json::json!({"regression": {"degree": 2}});
        match RunConfig::parse(&v.to_string()) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "solver.regression.degree"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_name_their_path() {
        let mut v = fixture();
        v["model"]["r"] = serde_json::json!([-1.0]);
        let cfg = RunConfig::parse(&v.to_string()).unwrap();
        assert!(matches!(prepare(&cfg), Err(Error::Config { path, .. }) if path == "model.r[0]"));
        let mut v = fixture();
        v["solver"] = serde_json::json!({"regression": {"ridge": 0.0}});
        let cfg = RunConfig::parse(&v.to_string()).unwrap();
        assert!(matches!(prepare(&cfg), Err(Error::Config { path, .. }) if path == "solver.regression.ridge"));
        let mut v = fixture();
        v["initial"]["gaussian"]["std"] = serde_json::json!([-0.1]);
        let cfg = RunConfig::parse(&v.to_string()).unwrap();
        assert!(matches!(prepare(&cfg), Err(Error::Config { path, .. }) if path == "initial.gaussian.std[0]"));
    }
}
