//! One-dimensional quadratic BSDEs by backward least-squares regression,
//! the exponential-transform oracle, and the scalar a priori bounds.

use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::constants::{c_delta_lambda_n, BoundError};
use crate::field::Field;
use crate::generator::StructuralConstants;
use crate::paths::PathEnsemble;
use crate::quadrature::{expect_normal_checked, QuadratureError};
use crate::regression::{FitDiagnostics, RegressionError, RegressionPlan};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("invalid option {name}: {reason}")]
    InvalidOption { name: &'static str, reason: String },
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error("non-finite value at step {step}, path {path}")]
    NonFinite { step: usize, path: usize },
    #[error("divergence at step {step}: |Y| = {value} exceeds ten times the bound {bound}")]
    Divergence { step: usize, value: f64, bound: f64 },
    #[error("driver failed at step {step}, path {path}: {message}")]
    Driver { step: usize, path: usize, message: String },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Bound(#[from] BoundError),
}

/// Where a driver is being evaluated.
#[derive(Debug, Clone, Copy)]
pub struct NodeCtx<'a> {
    pub k: usize,
    pub m: usize,
    pub t: f64,
    pub b: &'a [f64],
}

/// The generator `f(t, y, z)` of a scalar equation. The solver iterates in
/// `y` only when `depends_on_y` is true.
pub trait ScalarDriver: Sync {
    fn eval(&self, at: &NodeCtx<'_>, y: f64, z: &[f64]) -> Result<f64, String>;

    fn depends_on_y(&self) -> bool {
        true
    }
}

/// A driver from a plain function of `(t, y, z)`.
pub struct FnDriver<F> {
    f: F,
    uses_y: bool,
}

impl<F: Fn(f64, f64, &[f64]) -> f64 + Sync> FnDriver<F> {
    pub fn new(f: F) -> Self {
        FnDriver { f, uses_y: true }
    }

    /// A driver known not to read `y`.
    pub fn of_z(f: F) -> Self {
        FnDriver { f, uses_y: false }
    }
}

impl<F: Fn(f64, f64, &[f64]) -> f64 + Sync> ScalarDriver for FnDriver<F> {
    fn eval(&self, at: &NodeCtx<'_>, y: f64, z: &[f64]) -> Result<f64, String> {
        Ok((self.f)(at.t, y, z))
    }

    fn depends_on_y(&self) -> bool {
        self.uses_y
    }
}

pub const DEFAULT_Z_CLIP: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverOptions {
    pub basis_degree: usize,
    pub inner_iters: usize,
    /// Explicit cap on |Z|; when unset it is derived from `bmo_bound`.
    pub z_clip: Option<f64>,
    /// A known bound on the BMO norm of Z, used for the default clip.
    pub bmo_bound: Option<f64>,
    /// A known bound on sup |Y|, used for divergence detection.
    pub y_bound: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            basis_degree: 4,
            inner_iters: 3,
            z_clip: None,
            bmo_bound: None,
            y_bound: None,
        }
    }
}

impl SolverOptions {
    pub fn check(&self) -> Result<(), SolverError> {
        if self.basis_degree == 0 {
            return Err(SolverError::InvalidOption {
                name: "basis_degree",
                reason: "must be at least 1".into(),
            });
        }
        if self.inner_iters == 0 {
            return Err(SolverError::InvalidOption {
                name: "inner_iters",
                reason: "must be at least 1".into(),
            });
        }
        if let Some(c) = self.z_clip {
            if !(c > 0.0) {
                return Err(SolverError::InvalidOption {
                    name: "z_clip",
                    reason: format!("must be positive, got {c}"),
                });
            }
        }
        Ok(())
    }

    pub fn effective_z_clip(&self, dt: f64) -> f64 {
        match (self.z_clip, self.bmo_bound) {
            (Some(c), _) => c,
            (None, Some(b)) => 5.0 * b / dt.sqrt(),
            (None, None) => DEFAULT_Z_CLIP,
        }
    }
}

/// Solution on nodes `span.start..=span.end` of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSolution {
    /// First node covered.
    pub offset: usize,
    /// One value per path and node, `span.len() + 1` nodes.
    pub y: Field,
    /// One row of length d per path and step, `span.len()` nodes.
    pub z: Field,
    /// Per step, indexed from `offset`.
    pub diagnostics: Vec<FitDiagnostics>,
    pub z_clip: f64,
    /// Number of (path, step) pairs whose Z row was shortened to the clip.
    pub clipped: usize,
}

impl ScalarSolution {
    /// Cross-path mean of Y at the first node.
    pub fn y0_mean(&self) -> f64 {
        self.y.mean_at(0, 0)
    }
}

/// Terminal values `h(B_T)` for every path.
pub fn terminal_values(ens: &PathEnsemble, h: impl Fn(&[f64]) -> f64 + Sync) -> Vec<f64> {
    let n = ens.steps();
    (0..ens.paths()).into_par_iter().map(|m| h(ens.at(m, n))).collect()
}

/// Builds a regression plan and solves on the whole grid.
pub fn solve_scalar(
    driver: &dyn ScalarDriver,
    terminal: impl Fn(&[f64]) -> f64 + Sync,
    ens: &PathEnsemble,
    opts: &SolverOptions,
) -> Result<ScalarSolution, SolverError> {
    opts.check()?;
    let plan = RegressionPlan::build(ens, opts.basis_degree)?;
    let eta = terminal_values(ens, terminal);
    solve_scalar_on(driver, &eta, ens, &plan, 0..ens.steps(), opts)
}

/// Backward induction over steps `span` (terminal values sit at node
/// `span.end`), reusing a prebuilt plan.
pub fn solve_scalar_on(
    driver: &dyn ScalarDriver,
    terminal: &[f64],
    ens: &PathEnsemble,
    plan: &RegressionPlan,
    span: Range<usize>,
    opts: &SolverOptions,
) -> Result<ScalarSolution, SolverError> {
    opts.check()?;
    let m_paths = ens.paths();
    let d = ens.dim();
    let grid = ens.grid();
    let dt = grid.dt();
    let steps = span.len();
    let clip = opts.effective_z_clip(dt);
    assert_eq!(terminal.len(), m_paths, "one terminal value per path");
    let mut y = Field::zeros(m_paths, steps + 1, 1);
    let mut z = Field::zeros(m_paths, steps, d);
    y.node_mut(steps).copy_from_slice(terminal);
    let mut diagnostics = vec![
        FitDiagnostics {
            residual_rms: 0.0,
            dropped_columns: 0,
            condition: 0.0
        };
        steps
    ];
    let mut clipped = 0;
    let mut mean = vec![0.0; m_paths];
    let iters = if driver.depends_on_y() { opts.inner_iters } else { 1 };
    for local in (0..steps).rev() {
        let k = span.start + local;
        let t = grid.t(k);
        let fit = plan.fit(ens, k, y.node(local + 1));
        diagnostics[local] = fit.diagnostics;
        let zk = z.node_mut(local);
        plan.evaluate(ens, k, &fit, &mut mean, Some(zk));
        clipped += zk
            .par_chunks_mut(d)
            .map(|row| {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > clip {
                    let s = clip / norm;
                    row.iter_mut().for_each(|v| *v *= s);
                    1usize
                } else {
                    0
                }
            })
            .sum::<usize>();
        let zk = z.node(local);
        let yk: Result<Vec<f64>, SolverError> = (0..m_paths)
            .into_par_iter()
            .map(|m| {
                let at = NodeCtx { k, m, t, b: ens.at(m, k) };
                let zr = &zk[m * d..(m + 1) * d];
                let mut v = mean[m];
                for _ in 0..iters {
                    let f = driver.eval(&at, v, zr).map_err(|message| SolverError::Driver {
                        step: k,
                        path: m,
                        message,
                    })?;
                    v = mean[m] + f * dt;
                }
                if !v.is_finite() {
                    return Err(SolverError::NonFinite { step: k, path: m });
                }
                if let Some(bound) = opts.y_bound {
                    if v.abs() > 10.0 * bound {
                        return Err(SolverError::Divergence {
                            step: k,
                            value: v.abs(),
                            bound,
                        });
                    }
                }
                Ok(v)
            })
            .collect();
        y.node_mut(local).copy_from_slice(&yk?);
    }
    Ok(ScalarSolution {
        offset: span.start,
        y,
        z,
        diagnostics,
        z_clip: clip,
        clipped,
    })
}

/// `(1/gamma) ln E[exp(gamma h(sqrt(T) X))]`, X standard normal: the value at
/// time 0 of the equation with driver `(gamma/2)|z|^2`, d = 1.
pub fn cole_hopf_oracle(gamma: f64, h: impl Fn(f64) -> f64, horizon: f64, tol: f64) -> Result<f64, SolverError> {
    if gamma == 0.0 {
        return Err(SolverError::InvalidOption {
            name: "gamma",
            reason: "must be nonzero".into(),
        });
    }
    let s = horizon.sqrt();
    let v = expect_normal_checked(|x| (gamma * h(s * x)).exp(), tol)?;
    Ok(v.value.ln() / gamma)
}

fn growth_exponent(delta: f64) -> f64 {
    2.0 * (1.0 + delta) / (1.0 - delta)
}

/// Sup bound on |Y_t|:
/// `(1/gamma) ln 2 + |eta|_inf + C2 + phi(U_sup)(T - t) + gamma^{(1+delta)/(1-delta)} C_{delta,lambda,n} V_bmo^{2(1+delta)/(1-delta)} (T - t)`,
/// with C2 standing in for the sup of the integrated alpha.
pub fn apriori_y_bound(c: &StructuralConstants, eta_sup: f64, u_sup: f64, v_bmo: f64, t: f64) -> f64 {
    let rest = c.horizon - t;
    let e = (1.0 + c.delta) / (1.0 - c.delta);
    let vterm = if c.lambda == 0.0 {
        0.0
    } else {
        c.gamma.powf(e) * c_delta_lambda_n(c.delta, c.lambda, c.n) * v_bmo.powf(growth_exponent(c.delta)) * rest
    };
    2f64.ln() / c.gamma + eta_sup + c.c2 + c.phi.eval(u_sup) * rest + vterm
}

/// Bound on the conditional remaining quadratic variation of Z:
/// `(1/gamma^2) e^{2 gamma |eta|} + (1/gamma) e^{2 gamma Y_sup} (1 + 2 C2
/// + 2 phi(U_sup)(T-t) + 2 C_{delta,lambda,n} V_bmo^{...}(T-t))`.
pub fn apriori_bmo_bound(
    c: &StructuralConstants,
    eta_sup: f64,
    u_sup: f64,
    v_bmo: f64,
    y_sup: f64,
    t: f64,
) -> Result<f64, BoundError> {
    let g = c.gamma;
    let rest = c.horizon - t;
    let vterm = if c.lambda == 0.0 {
        0.0
    } else {
        2.0 * c_delta_lambda_n(c.delta, c.lambda, c.n) * v_bmo.powf(growth_exponent(c.delta)) * rest
    };
    let v = (2.0 * g * eta_sup).exp() / (g * g)
        + (2.0 * g * y_sup).exp() / g * (1.0 + 2.0 * c.c2 + 2.0 * c.phi.eval(u_sup) * rest + vterm);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(BoundError::OutsideDeskScale { quantity: "BMO bound" })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// Bounds `|Y_t|` for drivers with `|f| <= alpha + (gamma/2)|z|^2`.
    Absolute,
    /// Bounds `Y_t^+` for drivers with `f <= alpha + (gamma/2)|z|^2`.
    PositivePart,
}

/// Regression estimate of `(1/gamma) ln E_{t_k}[exp(payoff_k)] ` at every
/// path and node, for per-node payoffs given in the exponent.
fn log_conditional_exp(
    gamma: f64,
    ens: &PathEnsemble,
    plan: &RegressionPlan,
    exponent: impl Fn(usize, usize) -> f64 + Sync,
) -> Field {
    let paths = ens.paths();
    let n = ens.steps();
    let mut out = Field::zeros(paths, n + 1, 1);
    for k in 0..=n {
        let target: Vec<f64> = (0..paths).into_par_iter().map(|m| exponent(m, k).exp()).collect();
        let node = out.node_mut(k);
        if k == n {
            for (o, v) in node.iter_mut().zip(&target) {
                *o = v.ln() / gamma;
            }
            continue;
        }
        let mut mean = vec![0.0; paths];
        plan.conditional_mean(ens, k, &target, &mut mean);
        // A conditional mean of exp(.) is at least exp of the smallest
        // payoff; the floor keeps the logarithm defined under regression noise.
        let floor = target.iter().copied().fold(f64::INFINITY, f64::min);
        for (o, v) in node.iter_mut().zip(&mean) {
            *o = v.max(floor).ln() / gamma;
        }
    }
    out
}

/// Per-path, per-node bound on `|Y_t|` (or `Y_t^+`):
/// `(1/gamma) ln E_t[exp(gamma |eta| + gamma int_t^T alpha)]`.
/// `alpha_tail` holds `int_{t_k}^T alpha ds` for every path and node.
pub fn apriori_exponential_bound(
    gamma: f64,
    ens: &PathEnsemble,
    plan: &RegressionPlan,
    eta: &[f64],
    alpha_tail: &Field,
    mode: SignMode,
) -> Field {
    log_conditional_exp(gamma, ens, plan, |m, k| {
        let e = match mode {
            SignMode::Absolute => eta[m].abs(),
            SignMode::PositivePart => eta[m].max(0.0),
        };
        gamma * (e + alpha_tail.at(m, k)[0])
    })
}

/// Inputs to [`conditional_exp_bounds`].
#[derive(Debug, Clone, Copy)]
pub struct ExpBoundInputs<'a> {
    pub eta_sup: f64,
    pub u_sup: f64,
    /// Frozen V rows (n x d per path and step), when lambda > 0.
    pub v: Option<&'a Field>,
    /// Measured sup of |Y| standing in for the essential supremum.
    pub y_sup: f64,
    /// The solved Z of this component, needed for the left side in mode ii.
    pub z: Option<&'a Field>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExpBoundMode {
    /// Bound on `|Y_t|` under the sign condition on f.
    I,
    /// Exponential of the remaining quadratic variation, `0 < eps <= gamma_bar/9`.
    II { eps: f64 },
}

/// Both sides of a conditional exponential bound, per path and node. In
/// mode i `left` is empty (compare the solved |Y| with `right`, which is
/// already on the |Y| scale); in mode ii both are conditional expectations.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpBoundSides {
    pub left: Option<Field>,
    pub right: Field,
}

fn tail_sums(ens: &PathEnsemble, per_step: impl Fn(usize, usize) -> f64 + Sync) -> Field {
    let paths = ens.paths();
    let n = ens.steps();
    let dt = ens.grid().dt();
    let mut tail = Field::zeros(paths, n + 1, 1);
    for k in (0..n).rev() {
        let next: Vec<f64> = tail.node(k + 1).to_vec();
        tail.node_mut(k)
            .par_iter_mut()
            .enumerate()
            .for_each(|(m, v)| *v = next[m] + per_step(m, k) * dt);
    }
    tail
}

pub fn conditional_exp_bounds(
    c: &StructuralConstants,
    ens: &PathEnsemble,
    plan: &RegressionPlan,
    mode: ExpBoundMode,
    inputs: &ExpBoundInputs<'_>,
) -> Result<ExpBoundSides, SolverError> {
    let grid = ens.grid();
    let v_tail = match inputs.v {
        Some(v) if c.lambda > 0.0 => {
            let p = 1.0 + c.delta;
            tail_sums(ens, |m, k| v.at(m, k).iter().map(|a| a * a).sum::<f64>().sqrt().powf(p))
        }
        _ => Field::zeros(ens.paths(), ens.steps() + 1, 1),
    };
    match mode {
        ExpBoundMode::I => {
            let g = c.gamma;
            let right = log_conditional_exp(g, ens, plan, |m, k| {
                let rest = c.horizon - grid.t(k);
                g * (inputs.eta_sup + c.c2 + c.beta * inputs.u_sup * rest + c.lambda * v_tail.at(m, k)[0])
            });
            Ok(ExpBoundSides { left: None, right })
        }
        ExpBoundMode::II { eps } => {
            if !(eps > 0.0 && eps <= c.gamma_bar / 9.0) {
                return Err(SolverError::InvalidOption {
                    name: "eps",
                    reason: format!("must lie in (0, gamma_bar/9], got {eps}"),
                });
            }
            let z = inputs.z.ok_or(SolverError::InvalidOption {
                name: "z",
                reason: "mode ii needs the solved Z".into(),
            })?;
            let qv = tail_sums(ens, |m, k| z.at(m, k).iter().map(|a| a * a).sum::<f64>());
            let a = 0.5 * c.gamma_bar * eps;
            let left = log_conditional_exp(1.0, ens, plan, |m, k| a * qv.at(m, k)[0]);
            let right = log_conditional_exp(1.0, ens, plan, |m, k| {
                let rest = c.horizon - grid.t(k);
                6.0 * eps * inputs.y_sup
                    + 3.0 * eps * c.c2
                    + 3.0 * eps * c.beta * inputs.u_sup * rest
                    + 3.0 * eps * c.lambda * v_tail.at(m, k)[0]
            });
            // report both as conditional expectations, not logarithms
            let exp = |f: Field| {
                let (p, n, d) = (f.paths(), f.nodes(), f.dim());
                Field::from_vec(p, n, d, f.data().iter().map(|v| v.exp()).collect())
            };
            Ok(ExpBoundSides {
                left: Some(exp(left)),
                right: exp(right),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ens(m: usize, n: usize, d: usize) -> PathEnsemble {
        PathEnsemble::simulate(17, m, n, 1.0, d).unwrap()
    }

    #[test]
    fn zero_driver_with_constant_terminal() {
        let e = ens(500, 10, 2);
        let f = FnDriver::of_z(|_, _, _| 0.0);
        let s = solve_scalar(&f, |_| 3.25, &e, &SolverOptions::default()).unwrap();
        assert!(s.y.data().iter().all(|v| (v - 3.25).abs() < 1e-12));
        assert!(s.z.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn terminal_is_exact() {
        let e = ens(400, 8, 1);
        let f = FnDriver::of_z(|_, _, z: &[f64]| 0.5 * z[0] * z[0]);
        let s = solve_scalar(&f, |b| b[0].sin(), &e, &SolverOptions::default()).unwrap();
        for m in 0..e.paths() {
            assert_eq!(s.y.at(m, 8)[0], e.at(m, 8)[0].sin());
        }
    }

    #[test]
    fn girsanov_shift() {
        let e = ens(20_000, 20, 1);
        let f = FnDriver::of_z(|_, _, z: &[f64]| z[0]);
        let s = solve_scalar(&f, |b| b[0], &e, &SolverOptions::default()).unwrap();
        assert!((s.y0_mean() - 1.0).abs() < 2e-2, "{}", s.y0_mean());
    }

    #[test]
    fn linear_in_y_uses_the_inner_iteration() {
        let e = ens(200, 10, 1);
        let f = FnDriver::new(|_, y, _| y);
        let opts = SolverOptions {
            inner_iters: 60,
            ..SolverOptions::default()
        };
        let s = solve_scalar(&f, |_| 1.0, &e, &opts).unwrap();
        // implicit fixed point y = 1 + y dt per step
        let want = (1.0f64 - 0.1).powi(-10);
        assert_relative_eq!(s.y0_mean(), want, max_relative = 1e-10);
    }

    #[test]
    fn oracle_values() {
        assert_relative_eq!(cole_hopf_oracle(1.0, |b| b, 1.0, 1e-10).unwrap(), 0.5, max_relative = 1e-12);
        assert_relative_eq!(cole_hopf_oracle(3.0, |_| 0.7, 2.0, 1e-10).unwrap(), 0.7, max_relative = 1e-12);
        let a = cole_hopf_oracle(2.0, f64::sin, 1.0, 1e-10).unwrap();
        let b = (crate::quadrature::expect_normal(|x| (2.0 * x.sin()).exp(), 400)).ln() / 2.0;
        assert!((a - b).abs() < 1e-10);
        assert!(cole_hopf_oracle(0.0, f64::sin, 1.0, 1e-10).is_err());
    }

    #[test]
    fn clipped_terminal_matches_closed_form() {
        let v = cole_hopf_oracle(1.0, |b| b.clamp(-3.0, 3.0), 1.0, 1e-10).unwrap();
        assert!((v - 0.493684181960558).abs() < 1e-10, "{v}");
    }

    #[test]
    fn apriori_examples() {
        let mut c = StructuralConstants::new(1, 1, 1.0, 1.0);
        assert_relative_eq!(apriori_y_bound(&c, 1.0, 0.0, 0.0, 0.3), 2f64.ln() + 1.0, max_relative = 1e-12);
        assert_relative_eq!(apriori_bmo_bound(&c, 0.0, 0.0, 0.0, 0.0, 0.0).unwrap(), 2.0, max_relative = 1e-12);
        assert!(apriori_bmo_bound(&c, 0.0, 0.0, 0.0, 2.0, 0.0).unwrap() > 2.0);
        c.gamma = 1e-3;
        assert!(apriori_bmo_bound(&c, 1e6, 0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn exponential_bound_constant_terminal() {
        let e = ens(300, 6, 1);
        let plan = RegressionPlan::build(&e, 3).unwrap();
        let eta = vec![-1.5; e.paths()];
        let tail = Field::zeros(e.paths(), 7, 1);
        let b = apriori_exponential_bound(2.0, &e, &plan, &eta, &tail, SignMode::Absolute);
        assert!(b.data().iter().all(|v| (v - 1.5).abs() < 1e-10));
        let b = apriori_exponential_bound(2.0, &e, &plan, &eta, &tail, SignMode::PositivePart);
        assert!(b.data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn mode_ii_rejects_large_eps_and_starts_at_one() {
        let e = ens(300, 6, 1);
        let plan = RegressionPlan::build(&e, 2).unwrap();
        let mut c = StructuralConstants::new(1, 1, 1.0, 1.0);
        c.gamma_bar = 0.9;
        let z = Field::constant(e.paths(), 6, &[1.0]);
        let inputs = ExpBoundInputs {
            eta_sup: 0.0,
            u_sup: 0.0,
            v: None,
            y_sup: 0.0,
            z: Some(&z),
        };
        assert!(conditional_exp_bounds(&c, &e, &plan, ExpBoundMode::II { eps: 0.2 }, &inputs).is_err());
        let s = conditional_exp_bounds(&c, &e, &plan, ExpBoundMode::II { eps: 1e-9 }, &inputs).unwrap();
        assert!(s.left.unwrap().data().iter().all(|v| (v - 1.0).abs() < 1e-8));
        assert!(s.right.data().iter().all(|v| *v >= 1.0 - 1e-12));
    }
}
