//! The built-in oracle suite: each case solves a model with a known Y_0 and
//! compares. Tolerances are per case; `--quick` runs M = 5000, N = 25 with
//! the looser column.

use qbsde::generator::{Component, Family, GeneratorModel, StructuralConstants, TerminalCondition};
use qbsde::oracle::{deterministic_ode_case, implicit_euler_factor, linear_case, pure_quadratic_case};
use qbsde::paths::PathEnsemble;
use qbsde::picard::{picard_iterate, terminal_field, Init, PicardOptions};
use qbsde::regression::RegressionPlan;
use serde::Serialize;

pub const CASES: [&str; 5] = ["zero", "pure_quadratic", "mixed_signs", "linear", "deterministic_ode"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scale {
    pub paths: usize,
    pub steps: usize,
    pub quick: bool,
}

impl Scale {
    pub const DEFAULT: Scale = Scale {
        paths: 20_000,
        steps: 50,
        quick: false,
    };
    pub const QUICK: Scale = Scale {
        paths: 5_000,
        steps: 25,
        quick: true,
    };

    /// (default, quick) tolerance pair.
    fn tol(&self, pair: (f64, f64)) -> f64 {
        if self.quick {
            pair.1
        } else {
            pair.0
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub case: String,
    pub component: usize,
    pub reference: f64,
    pub estimate: f64,
    pub error: f64,
    pub tol: f64,
    pub pass: bool,
    pub method: String,
}

fn model(n: usize, fam: impl Fn(usize) -> Family) -> GeneratorModel {
    let c = StructuralConstants::new(n, 1, 1.0, 1.0);
    GeneratorModel::diagonal(c, (0..n).map(|i| Component::Builtin(fam(i))).collect()).expect("built-in model")
}

fn solve(model: &GeneratorModel, terminal: &TerminalCondition, scale: Scale, seed: u64, tol: f64) -> Result<Vec<f64>, String> {
    let ens = PathEnsemble::simulate(seed, scale.paths, scale.steps, 1.0, 1).map_err(|e| e.to_string())?;
    let reg = RegressionPlan::build(&ens, 4).map_err(|e| e.to_string())?;
    let xi = terminal_field(terminal, &ens).map_err(|e| e.to_string())?;
    let opts = PicardOptions {
        tol,
        max_iters: 100,
        ..PicardOptions::default()
    };
    let run = picard_iterate(model, &xi, &ens, &reg, 0..scale.steps, &opts, &Init::Zero).map_err(|e| e.to_string())?;
    Ok(run.solution.y0_mean())
}

fn rows(case: &str, method: &str, reference: &[f64], estimate: &[f64], tol: f64) -> Vec<CaseResult> {
    reference
        .iter()
        .zip(estimate)
        .enumerate()
        .map(|(i, (r, e))| {
            let error = (e - r).abs();
            CaseResult {
                case: case.into(),
                component: i + 1,
                reference: *r,
                estimate: *e,
                error,
                tol,
                pass: error <= tol,
                method: method.into(),
            }
        })
        .collect()
}

fn clip3(b: f64) -> f64 {
    b.clamp(-3.0, 3.0)
}

pub fn run_case(name: &str, scale: Scale) -> Result<Vec<CaseResult>, String> {
    match name {
        "zero" => {
            let m = model(1, |_| Family::Zero);
            let t = TerminalCondition::scalar(1, 1, true, |_| 1.0);
            let y = solve(&m, &t, scale, 1, 1e-4)?;
            Ok(rows(name, "constant terminal", &[1.0], &y, 1e-12))
        }
        "pure_quadratic" => {
            let m = model(1, |_| Family::DiagonalQuadratic { gamma: 1.0, sign: 1.0 });
            let t = TerminalCondition::scalar(1, 1, true, |b| clip3(b[0]));
            let y = solve(&m, &t, scale, 2, 1e-4)?;
            let o = pure_quadratic_case(&[1.0], &[1.0], &[&clip3], 1.0).map_err(|e| e.to_string())?;
            Ok(rows(name, o.method, &o.y0, &y, scale.tol((1e-2, 3e-2))))
        }
        "mixed_signs" => {
            let m = model(2, |i| Family::DiagonalQuadratic {
                gamma: 1.0,
                sign: if i == 0 { 1.0 } else { -1.0 },
            });
            let t = TerminalCondition::from_fn(2, 1, true, |b, out| {
                out[0] = b[0].sin();
                out[1] = b[0].sin();
            });
            let y = solve(&m, &t, scale, 3, 1e-4)?;
            let o = pure_quadratic_case(&[1.0, 1.0], &[1.0, -1.0], &[&f64::sin, &f64::sin], 1.0)
                .map_err(|e| e.to_string())?;
            Ok(rows(name, o.method, &o.y0, &y, scale.tol((1e-2, 3e-2))))
        }
        "linear" => {
            let m = model(1, |_| Family::Linear { mu: vec![0.5], c: 0.2 });
            let h = |b: &[f64]| (1.5 * b[0]).cos();
            let t = TerminalCondition::scalar(1, 1, true, h);
            let y = solve(&m, &t, scale, 4, 1e-4)?;
            let o = linear_case(&[0.5], 0.2, &h, 1.0).map_err(|e| e.to_string())?;
            Ok(rows(name, o.method, &o.y0, &y, scale.tol((1e-2, 3e-2))))
        }
        "deterministic_ode" => {
            let beta = 0.5;
            let m = model(1, |_| Family::LinearInY { beta });
            let t = TerminalCondition::scalar(1, 1, true, |_| 1.0);
            let y = solve(&m, &t, scale, 5, 1e-12)?;
            let discrete = implicit_euler_factor(beta, 1.0, scale.steps);
            let mut out = rows(name, "implicit Euler factor", &[discrete], &y, 1e-8);
            let o = deterministic_ode_case(beta, &[1.0], 1.0);
            out.extend(rows(name, o.method, &o.y0, &y, scale.tol((1e-2, 2e-2))));
            Ok(out)
        }
        other => Err(format!("unknown case {other:?}; known: {}", CASES.join(", "))),
    }
}

pub fn run_verify(filter: Option<&str>, scale: Scale) -> Result<Vec<CaseResult>, String> {
    let names: Vec<&str> = match filter {
        Some(f) if !CASES.contains(&f) => return Err(format!("unknown case {f:?}; known: {}", CASES.join(", "))),
        Some(f) => vec![f],
        None => CASES.to_vec(),
    };
    let mut out = Vec::new();
    for n in names {
        out.extend(run_case(n, scale)?);
    }
    Ok(out)
}

pub fn verify_text(results: &[CaseResult]) -> String {
    let mut s = format!(
        "{:<18} {:>4} {:>14} {:>14} {:>10} {:>8}  {}\n",
        "case", "comp", "reference", "estimate", "error", "tol", "result"
    );
    for r in results {
        s.push_str(&format!(
            "{:<18} {:>4} {:>14.8} {:>14.8} {:>10.2e} {:>8.0e}  {}\n",
            r.case,
            r.component,
            r.reference,
            r.estimate,
            r.error,
            r.tol,
            if r.pass { "pass" } else { "FAIL" }
        ));
    }
    s
}
