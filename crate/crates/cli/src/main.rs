//! `mfjump` command-line driver.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 no convergence or a failed
//! check, 3 blow-up, 4 certificate precondition violated, 5 HJB residual too large,
//! 6 operation unsupported for the model.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfjump::io::{write_adjoint_csv, write_ensemble_csv, write_json};
use mfjump::lqoracle::{compare_with_riccati, solve_riccati};
use mfjump::model::{certificate_coefficient, check_sufficiency_condition, verify_derivative_consistency};
use mfjump::solver::{solve_mftc, Solution};
use mfjump::value::{
    certify_gap, constant_shift, hjb_check, ito_check, q_r_characterization_check, random_shift_field, shifted_policy,
    FirstMoment, MeasureFunctional, SecondMoment,
};
use mfjump::Error;
use serde_json::json;

use config::{prepare, Prepared, RunConfig};

const HJB_RESIDUAL_TOL: f64 = 0.02;
const HJB_ARGMIN_TOL: f64 = 0.01;
const ITO_TOL: f64 = 5e-2;
const LQ_TOL: f64 = 0.01;

#[derive(Parser, Debug)]
#[command(name = "mfjump", version, about = "Mean-field-type control of jump-diffusions by the stochastic maximum principle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output` in the config; default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "MFJUMP_THREADS")]
    threads: Option<usize>,
    /// Picard tolerance for `solve` and `certify`; acceptance threshold of the check otherwise.
    #[arg(long, global = true)]
    tol: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the control problem and dump the ensemble, adjoint and report.
    Solve,
    /// Check the sufficiency condition and the analytic derivatives.
    Verify,
    /// Solve, then test the quadratic-gap certificate against shifted controls.
    Certify,
    /// Fit value derivatives and evaluate the HJB residual.
    Hjb {
        /// Replace the value function by zero (negative control).
        #[arg(long)]
        zero_value: bool,
    },
    /// Check the mean-field Ito formula along the solved ensemble.
    ItoCheck,
    /// Compare a linear-quadratic solve with the Riccati solution.
    LqCompare,
}

/// Terminal state of a subcommand.
enum Outcome {
    Ok,
    Failed(String),
    HjbLarge(String),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Domain(_) | Error::SizeLimit(_) => 1,
        Error::NoConvergence { .. } | Error::SingularRegression { .. } | Error::NonAdmissible(_) | Error::CallbackFailure { .. } => 2,
        Error::BlowUp { .. } | Error::RiccatiBlowUp { .. } => 3,
        Error::Precondition(_) => 4,
        Error::OperationUnsupported(_) | Error::MissingDerivatives(_) => 6,
    }
}

fn solve_or_report(p: &Prepared, out: &Path) -> mfjump::Result<Solution> {
    match solve_mftc(&p.problem.model, &p.problem.jumps, &p.mu, &p.solve) {
        Err(Error::NoConvergence { what, iterations, last_change, report: Some(report) }) => {
            write_json(&out.join("report.json"), &report)?;
            Err(Error::NoConvergence { what, iterations, last_change, report: Some(report) })
        }
        other => other,
    }
}

fn run(cli: &Cli, out: &Path, cfg: &RunConfig) -> mfjump::Result<Outcome> {
    let mut p = prepare(cfg)?;
    if let Some(seed) = cli.seed {
        p.solve.seed = seed;
    }
    let picard_tol = matches!(cli.command, Command::Solve | Command::Certify);
    if let (Some(t), true) = (cli.tol, picard_tol) {
        p.solve.tol_control = t;
        p.solve.validate()?;
    }
    let (model, jm) = (&p.problem.model, &p.problem.jumps);
    let exec = p.solve.exec;
    match &cli.command {
        Command::Solve => {
            let sol = solve_or_report(&p, out)?;
            write_ensemble_csv(&out.join("ensemble.csv"), &sol.ensemble)?;
            write_adjoint_csv(&out.join("adjoint.csv"), &sol.adjoint, jm.len())?;
            write_json(&out.join("report.json"), &sol.report)?;
            eprintln!(
                "converged after {} iterations; cost {:.6} +- {:.2e}",
                sol.report.iterations, sol.report.cost, sol.report.cost_std_error
            );
            Ok(Outcome::Ok)
        }
        Command::Verify => {
            let cond = check_sufficiency_condition(&model.constants);
            let v = &cfg.verify;
            let violations = verify_derivative_consistency(model, v.probes, v.h, cli.tol.unwrap_or(v.tol), p.solve.seed)?;
            println!("sufficiency (i): margin {:.6e} {}", cond.margin_i, if cond.holds_i { "ok" } else { "FAILS" });
            println!("sufficiency (ii): margin {:.6e} {}", cond.margin_ii, if cond.holds_ii { "ok" } else { "FAILS" });
            println!("certificate coefficient c = {:.6e}", certificate_coefficient(&model.constants));
            for viol in &violations {
                println!(
                    "derivative mismatch in `{}`: max relative error {:.3e} at probe {} ({} probes)",
                    viol.callback, viol.max_error, viol.worst_probe, viol.count
                );
            }
            write_json(&out.join("verify.json"), &json!({"sufficiency": cond, "violations": violations}))?;
            if !cond.holds() {
                return Ok(Outcome::Failed("sufficiency condition fails".into()));
            }
            if !violations.is_empty() {
                return Ok(Outcome::Failed(format!("{} derivative callbacks disagree with finite differences", violations.len())));
            }
            Ok(Outcome::Ok)
        }
        Command::Certify => {
            let cond = check_sufficiency_condition(&model.constants);
            if !cond.holds() {
                return Err(Error::Precondition(format!(
                    "sufficiency condition fails (margin_i = {:.4e}, margin_ii = {:.4e})",
                    cond.margin_i, cond.margin_ii
                )));
            }
            let sol = solve_or_report(&p, out)?;
            let d = model.control_dim();
            let mut results = Vec::new();
            for (i, s) in cfg.certify.shifts.iter().enumerate() {
                let delta = if s.len() == 1 { vec![s[0]; d] } else { s.clone() };
                if delta.len() != d {
                    return Err(Error::config(format!("certify.shifts[{i}]"), format!("expected 1 or {d} entries")));
                }
                let cert = certify_gap(model, jm, &sol, &constant_shift(&sol, &delta), exec)?;
                results.push((format!("constant {delta:?}"), cert));
            }
            for k in 0..cfg.certify.random_fields {
                let field = random_shift_field(model.n, d, cfg.certify.amplitude, p.solve.seed.wrapping_add(1 + k as u64));
                let cert = certify_gap(model, jm, &sol, &shifted_policy(&sol, field), exec)?;
                results.push((format!("random field {k}"), cert));
            }
            let mut failed = 0;
            for (name, c) in &results {
                println!(
                    "{name}: J(v) - J(u) = {:.6e} +- {:.2e}, c * |v - u|^2 = {:.6e} (c = {:.4e}) {}",
                    c.lhs, c.std_error, c.rhs, c.coefficient, if c.passes { "pass" } else { "FAIL" }
                );
                failed += usize::from(!c.passes);
            }
            let body: Vec<_> = results.iter().map(|(n, c)| json!({"alternative": n, "certificate": c})).collect();
            write_json(&out.join("certify.json"), &body)?;
            if failed > 0 {
                return Ok(Outcome::Failed(format!("{failed} certificates fail")));
            }
            Ok(Outcome::Ok)
        }
        Command::Hjb { zero_value } => {
            let mut hc = cfg.hjb.clone();
            hc.zero_value |= *zero_value;
            let (rep, vs) = hjb_check(model, jm, &p.mu, &p.solve, &hc)?;
            let qr = if hc.zero_value { None } else { Some(q_r_characterization_check(model, jm, &vs)?) };
            let tol = cli.tol.unwrap_or(HJB_RESIDUAL_TOL);
            println!("t = {}: residual {:.6e}, normalized {:.4e}", rep.t, rep.residual, rep.normalized);
            if let Some(m) = rep.minimizer_match {
                println!("argmin vs solver control: {m:.4e}");
            }
            if let Some(qr) = &qr {
                println!("q_err {:.4e}, r_err {:.4e}", qr.q_err, qr.r_err);
            }
            write_json(
                &out.join("hjb.json"),
                &json!({"report": rep, "characterization": qr, "fit_residual": vs.fit_residual, "growth_constant": vs.growth_constant}),
            )?;
            if !(rep.normalized <= tol) {
                return Ok(Outcome::HjbLarge(format!("normalized residual {:.4e} exceeds {tol}", rep.normalized)));
            }
            if rep.minimizer_match.is_some_and(|m| !(m <= HJB_ARGMIN_TOL)) {
                return Ok(Outcome::HjbLarge("HJB minimizer departs from the solver control".into()));
            }
            Ok(Outcome::Ok)
        }
        Command::ItoCheck => {
            let sol = solve_or_report(&p, out)?;
            let tol = cli.tol.unwrap_or(ITO_TOL);
            let mut fixtures: Vec<(String, Box<dyn MeasureFunctional>)> =
                (0..model.n).map(|c| (format!("first_moment_{}", c + 1), Box::new(FirstMoment(c)) as Box<dyn MeasureFunctional>)).collect();
            fixtures.push(("second_moment".into(), Box::new(SecondMoment)));
            let mut body = serde_json::Map::new();
            let mut worst: f64 = 0.0;
            for (name, f) in &fixtures {
                let rep = ito_check(model, jm, f.as_ref(), &sol.ensemble, exec);
                println!("{name}: max residual {:.4e}", rep.max_residual);
                worst = worst.max(rep.max_residual);
                body.insert(name.clone(), serde_json::to_value(&rep)?);
            }
            write_json(&out.join("ito.json"), &body)?;
            if !(worst <= tol) {
                return Ok(Outcome::Failed(format!("Ito residual {worst:.4e} exceeds {tol}")));
            }
            Ok(Outcome::Ok)
        }
        Command::LqCompare => {
            let Some(spec) = &p.problem.lq else {
                return Err(Error::OperationUnsupported("lq-compare needs a model of kind `lq`".into()));
            };
            let ric = solve_riccati(spec, &p.solve.grid()?)?;
            let sol = solve_or_report(&p, out)?;
            let cmp = compare_with_riccati(spec, model, jm, &sol)?;
            let tol = cli.tol.unwrap_or(LQ_TOL);
            println!(
                "cost {:.6} +- {:.2e} vs Riccati {:.6}: relative error {:.4e}; feedback relative error {:.4e}",
                cmp.cost, cmp.cost_std_error, cmp.value, cmp.cost_rel_error, cmp.feedback_rel_error
            );
            write_json(&out.join("lq_compare.json"), &json!({"comparison": cmp, "riccati": ric.coords}))?;
            if !(cmp.cost_rel_error <= tol && cmp.feedback_rel_error <= tol) {
                return Ok(Outcome::Failed(format!("relative errors exceed {tol}")));
            }
            Ok(Outcome::Ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    let Some(path) = &cli.config else {
        eprintln!("error: --config is required");
        return ExitCode::from(1);
    };
    let cfg = match RunConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let out = cli.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
    if let Err(e) = std::fs::create_dir_all(&out) {
        eprintln!("error: cannot create {}: {e}", out.display());
        return ExitCode::from(1);
    }
    match run(&cli, &out, &cfg) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(2)
        }
        Ok(Outcome::HjbLarge(msg)) => {
            eprintln!("HJB check failed: {msg}");
            ExitCode::from(5)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
